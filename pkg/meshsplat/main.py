import logging
from pathlib import Path
from typing import List, Optional

import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import EnvSettings, load_config
from .dataset import SCENARIOS, load_dataset, synth_dataset
from .errors import MeshSplatError
from .gradcheck import run_gradcheck
from .pipeline import ABLATION_FLAGS, eval_cmd, render_cmd, run_ablation, run_stage1, run_stage2

app = typer.Typer(help="Mesh-anchored surfel reconstruction of dynamic scenes.", no_args_is_help=True)
console = Console()

OVERRIDES = {"allow_extra_args": True, "ignore_unknown_options": True}


def _settings(ctx: typer.Context) -> EnvSettings:
    return ctx.obj if isinstance(ctx.obj, EnvSettings) else EnvSettings()


def _fail(error: MeshSplatError) -> None:
    console.print(f"[bold red]error:[/bold red] {error.detail}")
    raise typer.Exit(code=1)


def _table(title: str, rows: list[dict]) -> None:
    if not rows:
        return
    table = Table(title=title)
    for column in rows[0]:
        table.add_column(str(column))
    for row in rows:
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.values()))
    console.print(table)


@app.callback()
def setup(ctx: typer.Context):
    load_dotenv()
    try:
        settings = EnvSettings.from_env()
    except MeshSplatError as e:
        _fail(e)
    logging.basicConfig(
        level=settings.log_level.upper(), format="%(message)s", datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True)], force=True,
    )
    ctx.obj = settings


@app.command()
def synth(
    ctx: typer.Context,
    scenario: str = typer.Argument(..., help=f"One of: {', '.join(SCENARIOS)}"),
    frames: int = typer.Option(60, min=1),
    resolution: int = typer.Option(64, min=4),
    camera_mode: str = typer.Option("orbit", help="orbit or static"),
    seed: int = 0,
    amplitude: Optional[float] = None,
    clean: bool = typer.Option(False, help="Hand training the true meshes instead of degraded ones"),
    out: Optional[Path] = None,
):
    """Generate a synthetic dynamic scene with its prior mesh sequence."""
    out = out or _settings(ctx).runs_dir / "data" / scenario
    try:
        dataset = synth_dataset(scenario, frames, resolution, camera_mode, seed, out, amplitude, degrade=not clean)
    except MeshSplatError as e:
        _fail(e)
    console.print(f"wrote {len(dataset.frames)} frames to [bold]{out}[/bold]")


@app.command(context_settings=OVERRIDES)
def stage1(
    ctx: typer.Context,
    dataset: Path = typer.Option(..., help="Directory holding dataset.json"),
    config: Optional[Path] = typer.Option(None, help="YAML config file"),
    out: Optional[Path] = None,
):
    """Fit the deformation field to the prior mesh sequence."""
    out = out or _settings(ctx).runs_dir / "stage1"
    try:
        cfg = load_config(config, ctx.args)
        checkpoint = run_stage1(load_dataset(dataset), cfg, out)
    except MeshSplatError as e:
        _fail(e)
    console.print(f"stage-one checkpoint: [bold]{checkpoint}[/bold]")


@app.command(context_settings=OVERRIDES)
def stage2(
    ctx: typer.Context,
    dataset: Path = typer.Option(..., help="Directory holding dataset.json"),
    checkpoint: Path = typer.Option(..., help="Stage-one checkpoint"),
    config: Optional[Path] = None,
    out: Optional[Path] = None,
):
    """Train surfels, decoders and the deformation field jointly against the images."""
    settings = _settings(ctx)
    out = out or settings.runs_dir / "stage2"
    try:
        cfg = load_config(config, ctx.args)
        result = run_stage2(load_dataset(dataset), checkpoint, cfg, out, workers=settings.workers)
    except MeshSplatError as e:
        _fail(e)
    console.print(f"stage-two checkpoint: [bold]{result}[/bold]")


@app.command()
def render(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(...),
    cameras: Path = typer.Option(..., help="JSON list of camera records"),
    t: List[float] = typer.Option(..., "--t", help="Timestep in [0, 1]; repeat for a sequence"),
    out: Optional[Path] = None,
):
    """Render a trained scene along a camera path."""
    settings = _settings(ctx)
    out = out or settings.runs_dir / "renders"
    try:
        written = render_cmd(checkpoint, cameras, t, out, workers=settings.workers)
    except MeshSplatError as e:
        _fail(e)
    console.print(f"rendered {len(written)} frames into [bold]{out}[/bold]")


@app.command("eval")
def evaluate(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(...),
    dataset: Path = typer.Option(...),
    split: str = typer.Option("train", help="train or test"),
    out: Optional[Path] = None,
):
    """PSNR, SSIM and Chamfer (x1e-3) of a trained scene."""
    settings = _settings(ctx)
    out = out or checkpoint.parent.parent
    try:
        rows = eval_cmd(checkpoint, load_dataset(dataset), split, out, workers=settings.workers)
    except MeshSplatError as e:
        _fail(e)
    _table(f"metrics ({split})", rows)


@app.command()
def gradcheck(seed: int = 0,
              samples: Optional[int] = typer.Option(None, min=1, help="random entries per array; all when omitted")):
    """Compare analytic gradients with central finite differences."""
    try:
        results = run_gradcheck(seed, samples)
    except MeshSplatError as e:
        _fail(e)
    table = Table(title="gradient check")
    for column in ("parameter", "checked", "skipped", "max rel error", "ok"):
        table.add_column(column)
    for r in results:
        table.add_row(r.name, str(r.checked), str(r.skipped), f"{r.max_rel_error:.2e}",
                      "[green]yes[/green]" if r.passed else "[red]no[/red]")
    console.print(table)
    if not all(r.passed for r in results):
        raise typer.Exit(code=1)


@app.command(context_settings=OVERRIDES)
def ablate(
    ctx: typer.Context,
    flag: str = typer.Argument(..., help=f"One of: {', '.join(ABLATION_FLAGS)}"),
    dataset: Path = typer.Option(...),
    config: Optional[Path] = None,
    out: Optional[Path] = None,
):
    """Paired baseline and ablated runs with the same seed."""
    settings = _settings(ctx)
    out = out or settings.runs_dir / f"ablate_{flag}"
    try:
        cfg = load_config(config, ctx.args)
        rows = run_ablation(load_dataset(dataset), flag, cfg, out, workers=settings.workers)
    except MeshSplatError as e:
        _fail(e)
    _table(f"ablation: {flag}", rows)


if __name__ == "__main__":
    app()
