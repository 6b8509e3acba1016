"""Decode Gaussians into render-ready surfels under the locality constraints."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .mesh import Mesh, vertex_normals, vertex_normals_backward
from .nn import Mlp, sigmoid, softmax
from .quadtree import GaussianBatch, GaussianQuadTree

logger = logging.getLogger(__name__)

_NEXT = np.array([1, 2, 0])
_EPS = 1e-12


@dataclass
class SurfelSet:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    flow_anchor: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.center)

    def subset(self, index) -> "SurfelSet":
        anchor = None if self.flow_anchor is None else self.flow_anchor[index]
        return SurfelSet(self.center[index], self.tangent_u[index], self.tangent_v[index], self.scale[index],
                         self.normal[index], self.opacity[index], self.color[index], anchor)


@dataclass
class SurfelGrads:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SurfelGrads":
        z3 = lambda: np.zeros((n, 3))  # noqa: E731
        return cls(z3(), z3(), z3(), np.zeros((n, 2)), z3(), np.zeros(n), z3())


def _norm(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1)


def _safe(x: np.ndarray) -> np.ndarray:
    return np.where(x > _EPS, x, 1.0)


def triangle_base_height(lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """base = longest edge, height = 2 * area / base (area by Heron)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    half = 0.5 * lengths.sum(axis=-1)
    prod = half * np.prod(half[..., None] - lengths, axis=-1)
    area = np.sqrt(np.maximum(prod, 0.0))
    base = lengths.max(axis=-1)
    return base, np.where(base > _EPS, 2.0 * area / _safe(base), 0.0)


class AppearanceDecoders:
    """The three shared decoders: rotation/scale, normal offset and colour."""

    def __init__(
        self,
        feature_dim: int = 128,
        pose_dim: int = 32,
        hidden: int = 64,
        rng: Optional[np.random.Generator] = None,
        offset_constraint: bool = True,
        scale_constraint: bool = True,
        offset_u_mode: str = "literal",
    ):
        if offset_u_mode not in ("literal", "shifted"):
            raise ShapeError(f"unknown offset_u_mode {offset_u_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.pose_dim = pose_dim
        self.qs = Mlp([feature_dim + 2, hidden, hidden, 3], rng=rng)
        self.offset = Mlp([feature_dim, hidden, hidden, 1], rng=rng, zero_last=True)
        self.color = Mlp([feature_dim + pose_dim, hidden, hidden, 3], output_activation="sigmoid", rng=rng)
        self.offset_constraint = offset_constraint
        self.scale_constraint = scale_constraint
        self.u_shift = 1.0 if offset_u_mode == "shifted" else 0.0

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        params.update(self.qs.named_parameters("decoder.qs"))
        params.update(self.offset.named_parameters("decoder.offset"))
        params.update(self.color.named_parameters("decoder.color"))
        return params

    def offset_factor(self, e_p: np.ndarray, e_g: np.ndarray) -> np.ndarray:
        return np.tanh(e_p / e_g - self.u_shift)

    def build(self, batch: GaussianBatch, positions: np.ndarray, mesh_faces: np.ndarray,
              vertex_colors: Optional[np.ndarray], pose: np.ndarray) -> tuple[SurfelSet, dict]:
        g = len(batch)
        root_vid = mesh_faces[batch.root]
        P = positions[root_vid]
        Bc = batch.corner_bary
        Q = np.einsum("gij,gjk->gik", Bc, P)
        x0 = np.einsum("gj,gjk->gk", batch.bary, P)

        vnormals, ncache = vertex_normals(positions, mesh_faces)
        Nr = vnormals[root_vid]
        nr = np.einsum("gj,gjk->gk", batch.bary, Nr)
        nlen = _safe(_norm(nr))
        n = nr / nlen[:, None]

        E = Q[:, _NEXT] - Q
        lengths = _norm(E)
        Ep = P[:, _NEXT] - P
        root_lengths = _norm(Ep)
        e_p = root_lengths.mean(axis=1)
        e_g = lengths.mean(axis=1)
        A, B = E[:, 0], -E[:, 2]
        cross = np.cross(A, B)
        area = 0.5 * _norm(cross)
        longest = np.argmax(lengths, axis=1)
        base = lengths[np.arange(g), longest]
        degenerate = (base <= _EPS) | (area <= _EPS)
        if np.any(degenerate):
            logger.warning("%d degenerate gaussian faces get zero scale", int(degenerate.sum()))
        height = np.where(degenerate, 0.0, 2.0 * area / _safe(base))
        l0 = _safe(lengths[:, 0])

        qs_in = np.concatenate([batch.features, (lengths[:, 1] / l0)[:, None], (lengths[:, 2] / l0)[:, None]], axis=1)
        qs_out, qs_cache = self.qs.forward(qs_in)
        theta, zu, zv = qs_out[:, 0], qs_out[:, 1], qs_out[:, 2]
        if self.scale_constraint:
            sig_u, sig_v = sigmoid(zu), sigmoid(zv)
            su, sv = sig_u * base / 4.0, sig_v * height / 4.0
        else:
            sig_u, sig_v = np.exp(zu), np.exp(zv)
            su, sv = sig_u * base / 8.0, sig_v * height / 8.0
        su = np.where(degenerate, 0.0, su)
        sv = np.where(degenerate, 0.0, sv)

        z_off, off_cache = self.offset.forward(batch.features)
        z = z_off[:, 0]
        wbar = np.prod(1.0 - batch.bary, axis=1)
        u_fac = self.offset_factor(e_p, _safe(e_g))
        th = np.tanh(z)
        offset = wbar * u_fac * e_p * th if self.offset_constraint else z * e_p
        center = x0 + offset[:, None] * n

        e0 = E[:, 0]
        e0n = np.sum(e0 * n, axis=1)
        t0r = e0 - e0n[:, None] * n
        t0len = _safe(_norm(t0r))
        t0 = t0r / t0len[:, None]
        t1 = np.cross(n, t0)
        cos, sin = np.cos(theta), np.sin(theta)
        tu = cos[:, None] * t0 + sin[:, None] * t1
        tv = cos[:, None] * t1 - sin[:, None] * t0

        pose = np.asarray(pose, dtype=np.float64).reshape(-1)
        c_in = np.concatenate([batch.features, np.broadcast_to(pose, (g, len(pose)))], axis=1)
        c_net, c_cache = self.color.forward(c_in)
        if vertex_colors is None:
            corner_colors = np.zeros((g, 3, 3))
            vcr = np.zeros((g, 3, 3))
        else:
            vcr = vertex_colors[root_vid]
            corner_colors = np.einsum("gij,gjc->gic", Bc, vcr)
        raw = c_net + np.einsum("gi,gic->gc", batch.feature_weights, corner_colors)
        color = np.clip(raw, 0.0, 1.0)

        surfels = SurfelSet(center, tu, tv, np.stack([su, sv], axis=1), n, batch.opacity.copy(), color)
        cache = dict(
            batch=batch, positions=positions, mesh_faces=mesh_faces, root_vid=root_vid, P=P, Q=Q,
            ncache=ncache, Nr=Nr, nlen=nlen, n=n, E=E, lengths=lengths, Ep=Ep, root_lengths=root_lengths,
            e_p=e_p, e_g=e_g, A=A, B=B, cross=cross, area=area, longest=longest, base=base, height=height,
            degenerate=degenerate, l0=l0, qs_cache=qs_cache, sig_u=sig_u, sig_v=sig_v, su=su, sv=sv,
            off_cache=off_cache, z=z, wbar=wbar, u_fac=u_fac, th=th, offset=offset, e0=e0, e0n=e0n,
            t0=t0, t0len=t0len, t1=t1, cos=cos, sin=sin, tu=tu, tv=tv, c_cache=c_cache, raw=raw,
            corner_colors=corner_colors, vcr=vcr,
        )
        return surfels, cache

    def backward(self, cache: dict, grads: SurfelGrads) -> dict:
        """Returns decoder parameter gradients plus gradients for the tree, positions and pose."""
        batch: GaussianBatch = cache["batch"]
        g, d = len(batch), self.feature_dim
        rows = np.arange(g)
        g_f = np.zeros((g, d))
        g_bary = np.zeros((g, 3))
        g_bc = np.zeros((g, 3, 3))
        g_P = np.zeros((g, 3, 3))
        g_Q = np.zeros((g, 3, 3))
        g_n = grads.normal.copy()

        raw = cache["raw"]
        g_raw = grads.color * ((raw >= 0.0) & (raw <= 1.0))
        c_grads, g_cin = self.color.backward(cache["c_cache"], g_raw)
        g_f += g_cin[:, :d]
        g_pose = g_cin[:, d:].sum(axis=0)
        g_fw = np.einsum("gc,gic->gi", g_raw, cache["corner_colors"])
        g_cc = batch.feature_weights[:, :, None] * g_raw[:, None, :]
        g_bc += np.einsum("gic,gjc->gij", g_cc, cache["vcr"])

        t0, t1, n = cache["t0"], cache["t1"], cache["n"]
        cos, sin = cache["cos"][:, None], cache["sin"][:, None]
        g_t0 = cos * grads.tangent_u - sin * grads.tangent_v
        g_t1 = sin * grads.tangent_u + cos * grads.tangent_v
        g_theta = np.sum(grads.tangent_u * cache["tv"], axis=1) - np.sum(grads.tangent_v * cache["tu"], axis=1)
        g_n += np.cross(t0, g_t1)
        g_t0 += np.cross(g_t1, n)
        g_t0r = (g_t0 - t0 * np.sum(t0 * g_t0, axis=1, keepdims=True)) / cache["t0len"][:, None]
        g_e0 = g_t0r - n * np.sum(n * g_t0r, axis=1, keepdims=True)
        g_n -= cache["e0n"][:, None] * g_t0r + cache["e0"] * np.sum(n * g_t0r, axis=1, keepdims=True)

        g_x0 = grads.center
        g_off = np.sum(grads.center * n, axis=1)
        g_n += cache["offset"][:, None] * grads.center

        e_p, e_g = cache["e_p"], _safe(cache["e_g"])
        g_lengths = np.zeros((g, 3))
        g_root_lengths = np.zeros((g, 3))
        if self.offset_constraint:
            wbar, u_fac, th = cache["wbar"], cache["u_fac"], cache["th"]
            g_z = g_off * wbar * u_fac * e_p * (1.0 - th * th)
            g_wbar = g_off * u_fac * e_p * th
            one_minus = 1.0 - batch.bary
            others = np.stack([one_minus[:, 1] * one_minus[:, 2], one_minus[:, 0] * one_minus[:, 2],
                               one_minus[:, 0] * one_minus[:, 1]], axis=1)
            g_bary -= g_wbar[:, None] * others
            g_ratio = g_off * wbar * e_p * th * (1.0 - u_fac * u_fac)
            g_ep = g_off * wbar * u_fac * th + g_ratio / e_g
            g_eg = -g_ratio * e_p / (e_g * e_g)
        else:
            g_z = g_off * e_p
            g_ep = g_off * cache["z"]
            g_eg = np.zeros(g)
        off_grads, g_off_in = self.offset.backward(cache["off_cache"], g_z[:, None])
        g_f += g_off_in
        g_lengths += g_eg[:, None] / 3.0
        g_root_lengths += g_ep[:, None] / 3.0

        live = ~cache["degenerate"]
        su, sv = cache["su"], cache["sv"]
        base, height = cache["base"], cache["height"]
        gsu, gsv = grads.scale[:, 0] * live, grads.scale[:, 1] * live
        if self.scale_constraint:
            sig_u, sig_v = cache["sig_u"], cache["sig_v"]
            g_zu = gsu * base / 4.0 * sig_u * (1.0 - sig_u)
            g_zv = gsv * height / 4.0 * sig_v * (1.0 - sig_v)
            g_base = gsu * sig_u / 4.0
            g_height = gsv * sig_v / 4.0
        else:
            g_zu, g_zv = gsu * su, gsv * sv
            g_base = gsu * cache["sig_u"] / 8.0
            g_height = gsv * cache["sig_v"] / 8.0
        safe_base = _safe(base)
        g_area = np.where(live, g_height * 2.0 / safe_base, 0.0)
        g_base = g_base - np.where(live, g_height * 2.0 * cache["area"] / (safe_base * safe_base), 0.0)

        qs_grads, g_qin = self.qs.backward(cache["qs_cache"], np.stack([g_theta, g_zu, g_zv], axis=1))
        g_f += g_qin[:, :d]
        lengths, l0 = cache["lengths"], cache["l0"]
        g_lengths[:, 1] += g_qin[:, d] / l0
        g_lengths[:, 2] += g_qin[:, d + 1] / l0
        g_lengths[:, 0] -= (g_qin[:, d] * lengths[:, 1] + g_qin[:, d + 1] * lengths[:, 2]) / (l0 * l0)
        g_lengths[rows, cache["longest"]] += g_base

        cross = cache["cross"]
        g_cross = (0.5 * g_area / _safe(2.0 * cache["area"]))[:, None] * cross
        g_A = np.cross(cache["B"], g_cross)
        g_B = np.cross(g_cross, cache["A"])
        E = cache["E"]
        g_E = g_lengths[..., None] * E / _safe(lengths)[..., None]
        g_E[:, 0] += g_e0
        for k in range(3):
            g_Q[:, _NEXT[k]] += g_E[:, k]
            g_Q[:, k] -= g_E[:, k]
        g_Q[:, 1] += g_A
        g_Q[:, 0] -= g_A + g_B
        g_Q[:, 2] += g_B

        Ep, root_lengths = cache["Ep"], cache["root_lengths"]
        g_Ep = g_root_lengths[..., None] * Ep / _safe(root_lengths)[..., None]
        for k in range(3):
            g_P[:, _NEXT[k]] += g_Ep[:, k]
            g_P[:, k] -= g_Ep[:, k]

        g_nr = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / cache["nlen"][:, None]
        g_bary += np.einsum("gk,gjk->gj", g_nr, cache["Nr"])
        g_Nr = batch.bary[:, :, None] * g_nr[:, None, :]

        P = cache["P"]
        g_bary += np.einsum("gk,gjk->gj", g_x0, P)
        g_P += batch.bary[:, :, None] * g_x0[:, None, :]
        g_bc += np.einsum("gik,gjk->gij", g_Q, P)
        g_P += np.einsum("gij,gik->gjk", batch.corner_bary, g_Q)

        positions, mesh_faces, root_vid = cache["positions"], cache["mesh_faces"], cache["root_vid"]
        g_vn = np.zeros_like(positions)
        np.add.at(g_vn, root_vid, g_Nr)
        g_positions = vertex_normals_backward(positions, mesh_faces, cache["ncache"], g_vn)
        np.add.at(g_positions, root_vid, g_P)

        params = {}
        params.update(Mlp.named_gradients("decoder.qs", qs_grads))
        params.update(Mlp.named_gradients("decoder.offset", off_grads))
        params.update(Mlp.named_gradients("decoder.color", c_grads))
        return dict(
            params=params, bary=g_bary, corner_bary=g_bc, features=g_f, feature_weights=g_fw,
            opacity=grads.opacity.copy(), positions=g_positions, pose=g_pose,
        )

    def decode_rotation_scale(self, features: np.ndarray, edge_lengths: np.ndarray):
        """(angle, s_u, s_v) for one Gaussian face with edges e1, e2, e3."""
        lengths = np.asarray(edge_lengths, dtype=np.float64)
        base, height = triangle_base_height(lengths)
        if lengths[0] <= _EPS or base <= _EPS or height <= _EPS:
            logger.warning("degenerate gaussian face %s gets zero scale", lengths)
            return 0.0, 0.0, 0.0
        out = self.qs(np.concatenate([features, [lengths[1] / lengths[0], lengths[2] / lengths[0]]]))
        if self.scale_constraint:
            return float(out[0]), float(sigmoid(out[1]) * base / 4.0), float(sigmoid(out[2]) * height / 4.0)
        return float(out[0]), float(np.exp(out[1]) * base / 8.0), float(np.exp(out[2]) * height / 8.0)

    def decode_color(self, features: np.ndarray, pose: np.ndarray, corner_colors: np.ndarray,
                     c_logits: Optional[np.ndarray] = None) -> np.ndarray:
        weights = softmax(np.zeros(3) if c_logits is None else np.asarray(c_logits, dtype=np.float64))
        net = self.color(np.concatenate([features, np.asarray(pose).reshape(-1)]))
        return np.clip(net + weights @ np.asarray(corner_colors), 0.0, 1.0)

    def decode_offset(self, features: np.ndarray, bary: np.ndarray, e_p: float, e_g: float) -> float:
        z = float(self.offset(features)[0])
        if not self.offset_constraint:
            return z * e_p
        wbar = float(np.prod(1.0 - np.asarray(bary)))
        return float(wbar * self.offset_factor(e_p, e_g) * e_p * np.tanh(z))


def build_surfels(
    tree: GaussianQuadTree,
    positions: np.ndarray,
    decoders: AppearanceDecoders,
    pose: np.ndarray,
    canonical: Mesh,
    previous_positions: Optional[np.ndarray] = None,
    previous_pose: Optional[np.ndarray] = None,
    batch: Optional[GaussianBatch] = None,
) -> tuple[SurfelSet, dict]:
    """Surfels for every rendered Gaussian, with flow anchors from the previous timestep.

    Anchors are plain values; no gradient flows into them.
    """
    batch = batch if batch is not None else tree.gaussians()
    surfels, cache = decoders.build(batch, positions, tree.mesh_faces, canonical.vertex_colors, pose)
    if previous_positions is None:
        surfels.flow_anchor = surfels.center.copy()
    else:
        prev_pose = pose if previous_pose is None else previous_pose
        previous, _ = decoders.build(batch, previous_positions, tree.mesh_faces, canonical.vertex_colors, prev_pose)
        surfels.flow_anchor = previous.center
    return surfels, cache
