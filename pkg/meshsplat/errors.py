class MeshSplatError(Exception):
    """Base for every failure the pipeline reports on purpose."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class MeshError(MeshSplatError):
    pass


class DegenerateInputError(MeshSplatError):
    pass


class ShapeError(MeshSplatError):
    pass


class ConfigError(MeshSplatError):
    pass


class DatasetError(MeshSplatError):
    pass


class CheckpointError(MeshSplatError):
    pass


class RenderError(MeshSplatError):
    pass


class TreeError(MeshSplatError):
    pass
