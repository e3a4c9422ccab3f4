"""Toy encoder-decoder landmark extractor.

Three heads share one backbone: a location map ``L`` used for detection and
soft-argmax refinement, a credibility map ``C`` normalised to sum to one,
and per-pixel descriptors built from bilinearly upsampled encoder stages and
a 1×1 projection to 248 channels. Descriptors are never materialised at full
resolution during training; association only needs dot products, which are
computed through the projection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from . import tensor as T
from .fusion import BLIND_BINS, SoftMask
from .tensor import Tensor

logger = logging.getLogger(__name__)

DESC_EPS = 1e-12


@dataclass
class ExtractorConfig:
    channels: tuple = (8, 16, 32)
    decoder_channels: int = 8
    desc_dim: int = 248
    n_landmarks: int = 64
    nms_radius: float = 6.0
    peaks_only: bool = False
    patch_size: int = 5
    kappa_subpixel: float = 0.01
    kappa_assoc: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("channels must be three positive integers")
        if self.n_landmarks < 4:
            raise ValueError("n_landmarks must be at least 4 for the velocity solve")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be at least 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if not (self.kappa_subpixel > 0 and self.kappa_assoc > 0):
            raise ValueError("temperatures must be positive")
        if self.desc_dim < 1:
            raise ValueError("desc_dim must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def avg_pool2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise T.ShapeError(f"pooling needs even spatial size, got {h}×{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


@dataclass
class DescriptorField:
    """Per-pixel descriptors ``normalize(P·F[:, i, j])`` kept in factored form.

    ``F`` stacks the encoder stages upsampled to full resolution; it is built
    on first use so odometry without association never pays for it.
    """

    stages: list  # encoder outputs, c_s×h_s×w_s
    size: tuple  # full resolution (H, W)
    P: Tensor  # desc_dim×c projection
    _F: Tensor | None = None

    @property
    def F(self) -> Tensor:
        if self._F is None:
            self._F = T.concat([T.resize_bilinear(s, *self.size) for s in self.stages])
        return self._F

    @property
    def shape(self) -> tuple:
        return (self.P.shape[0],) + tuple(self.size)

    def flat(self) -> Tensor:
        return self.F.reshape(self.F.shape[0], -1)

    def norms(self) -> Tensor:
        """Row vector (1, H·W) of descriptor norms."""
        Ff = self.flat()
        PtP = T.matmul(self.P.T, self.P)
        return T.sqrt((Ff * T.matmul(PtP, Ff)).sum(axis=0, keepdims=True) + DESC_EPS)

    def dense(self) -> Tensor:
        """Materialised desc_dim×H×W map (testing and small inputs)."""
        D = T.matmul(self.P, self.flat()) / self.norms()
        return D.reshape(self.shape)

    def sample(self, uv: Tensor) -> Tensor:
        """Descriptors at sub-pixel locations, N×desc_dim, unit norm."""
        f = bilinear_sample(self.F, uv)  # c×N
        q = T.matmul(self.P, f).T
        return q / T.sqrt(T.square(q).sum(axis=1, keepdims=True) + DESC_EPS)


@dataclass
class Features:
    L: Tensor
    C: Tensor
    D: DescriptorField
    x: Tensor
    mask: SoftMask


class ExtractorNet:
    """Encoder (3 stages, conv3×3 + ReLU + 2× average pool), mirrored decoder
    with skip connections, and location/score/descriptor heads."""

    def __init__(self, config: ExtractorConfig | None = None, zero_heads: bool = False):
        self.config = config or ExtractorConfig()
        c1, c2, c3 = self.config.channels
        cd = self.config.decoder_channels
        rng = np.random.default_rng([self.config.seed, 11])
        p = {}
        p["enc1.w"] = _he(rng, (c1, 1, 3, 3), 9)
        p["enc1.b"] = np.zeros(c1)
        p["enc2.w"] = _he(rng, (c2, c1, 3, 3), 9 * c1)
        p["enc2.b"] = np.zeros(c2)
        p["enc3.w"] = _he(rng, (c3, c2, 3, 3), 9 * c2)
        p["enc3.b"] = np.zeros(c3)
        p["dec3.w"] = _he(rng, (c2, c3 + c2, 3, 3), 9 * (c3 + c2))
        p["dec3.b"] = np.zeros(c2)
        p["dec2.w"] = _he(rng, (c1, c2 + c1, 3, 3), 9 * (c2 + c1))
        p["dec2.b"] = np.zeros(c1)
        p["dec1.w"] = _he(rng, (cd, c1 + 1, 3, 3), 9 * (c1 + 1))
        p["dec1.b"] = np.zeros(cd)
        head_scale = 0.0 if zero_heads else 0.1
        p["loc.w"] = head_scale * rng.normal(0, 1.0 / np.sqrt(cd), (1, cd, 1, 1))
        p["loc.b"] = np.zeros(1)
        p["loc.gain"] = np.ones(1)
        p["score.w"] = head_scale * rng.normal(0, 1.0 / np.sqrt(cd), (1, cd, 1, 1))
        p["score.b"] = np.zeros(1)
        cf = c1 + c2 + c3
        p["desc.proj"] = rng.normal(0, 1.0 / np.sqrt(cf), (self.config.desc_dim, cf))
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @staticmethod
    def normalize_input(M: np.ndarray) -> np.ndarray:
        pos = M[M > 0]
        s = float(pos.mean()) if pos.size else 1.0
        return np.log1p(M / s)

    def forward(self, mask: SoftMask) -> Features:
        p = self.params
        H, W = mask.M.shape
        if H % 8 or W % 8:
            raise T.ShapeError(f"input size {H}×{W} must be divisible by 8")
        x = Tensor(self.normalize_input(mask.M)[None])

        def conv(name, inp):
            return T.conv2d(inp, p[name + ".w"], padding=p[name + ".w"].shape[-1] // 2) + \
                p[name + ".b"].reshape(-1, 1, 1)

        s1 = avg_pool2(T.relu(conv("enc1", x)))  # H/2
        s2 = avg_pool2(T.relu(conv("enc2", s1)))  # H/4
        s3 = avg_pool2(T.relu(conv("enc3", s2)))  # H/8
        d3 = T.relu(conv("dec3", T.concat([T.resize_bilinear(s3, H // 4, W // 4), s2])))
        d2 = T.relu(conv("dec2", T.concat([T.resize_bilinear(d3, H // 2, W // 2), s1])))
        d1 = T.relu(conv("dec1", T.concat([T.resize_bilinear(d2, H, W), x])))

        L = (T.conv2d(d1, p["loc.w"]) + p["loc.b"].reshape(1, 1, 1) + x * p["loc.gain"].reshape(1, 1, 1))[0]
        sc = T.softplus(T.conv2d(d1, p["score.w"]) + p["score.b"].reshape(1, 1, 1))[0]
        C = sc / sc.sum()
        return Features(L, C, DescriptorField([s1, s2, s3], (H, W), p["desc.proj"]), x[0], mask)

    __call__ = forward

    # -- checkpoint ---------------------------------------------------------------
    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks parameter {k!r}")
            if state[k].shape != v.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {state[k].shape} != model shape {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)


# -- detection --------------------------------------------------------------------------

def first_valid_row(H_up: int, H_native: int, blind_bins: int = BLIND_BINS) -> int:
    """First upsampled row whose range lies beyond the blanked near-range band."""
    scale = (H_native - 1) / (H_up - 1)
    return int(np.floor(blind_bins / scale + 1e-9)) + 1


def select_topn(L, n: int, nms_radius: float = 3.0, min_row: int = 0,
                valid: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Greedy non-maximum suppression over the location map.

    Returns (candidates n'×2 int (row, col), incomplete) where ``incomplete``
    flags that fewer than ``n`` pixels were available. Ties go to the lower
    row-major index.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if nms_radius < 1:
        raise ValueError("nms_radius must be at least 1")
    Ld = L.data if isinstance(L, Tensor) else np.asarray(L, float)
    H, W = Ld.shape
    ok = np.ones((H, W), dtype=bool)
    ok[:min_row] = False
    if valid is not None:
        ok &= valid
    flat = Ld.ravel()
    order = np.argsort(-flat, kind="stable")
    order = order[ok.ravel()[order]]
    r = int(np.floor(nms_radius))
    dr, dc = np.mgrid[-r: r + 1, -r: r + 1]
    disk = dr ** 2 + dc ** 2 <= nms_radius ** 2
    dr, dc = dr[disk], dc[disk]
    suppressed = np.zeros((H, W), dtype=bool)
    picks = []
    for idx in order:
        i, j = divmod(int(idx), W)
        if suppressed[i, j]:
            continue
        picks.append((i, j))
        if len(picks) == n:
            break
        rr, cc = i + dr, j + dc
        inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        suppressed[rr[inside], cc[inside]] = True
    incomplete = len(picks) < n
    if incomplete:
        logger.debug("only %d of %d landmark candidates available", len(picks), n)
    return np.asarray(picks, dtype=int).reshape(-1, 2), incomplete


def patch_indices(cands: np.ndarray, shape: tuple, patch: int, min_row: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row/col indices (n, patch²) of patches, shifted to stay inside the image."""
    H, W = shape
    half = patch // 2
    r0 = np.clip(cands[:, 0] - half, min_row, H - patch)
    c0 = np.clip(cands[:, 1] - half, 0, W - patch)
    off_r, off_c = np.divmod(np.arange(patch * patch), patch)
    return r0[:, None] + off_r[None], c0[:, None] + off_c[None]


def subpixel_refine(L, cands: np.ndarray, patch_size: int = 5, kappa: float = 0.01,
                    min_row: int = 0) -> Tensor:
    """Soft-argmax coordinates (n×2, row then column) over each candidate patch."""
    if patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    L = T._as_tensor(L)
    cands = np.asarray(cands, dtype=int).reshape(-1, 2)
    rows, cols = patch_indices(cands, L.shape, patch_size, min_row)
    w = T.softmax(L[rows, cols], axis=1, temperature=kappa)
    u = (w * rows.astype(np.float64)).sum(axis=1)
    v = (w * cols.astype(np.float64)).sum(axis=1)
    return T.stack([u, v], axis=1)


def bilinear_sample(img: Tensor, uv: Tensor) -> Tensor:
    """Sample a H×W or c×H×W tensor at sub-pixel (row, col) locations.

    Returns (N,) or (c, N). Differentiable with respect to both the image and
    the coordinates.
    """
    img = T._as_tensor(img)
    uv = T._as_tensor(uv)
    squeeze = img.ndim == 2
    if squeeze:
        img = img.reshape(1, *img.shape)
    _, H, W = img.shape
    u, v = uv[:, 0], uv[:, 1]
    i0 = np.clip(np.floor(u.data).astype(int), 0, H - 2)
    j0 = np.clip(np.floor(v.data).astype(int), 0, W - 2)
    fu = u - i0.astype(np.float64)
    fv = v - j0.astype(np.float64)
    a = img[:, i0, j0]
    b = img[:, i0, j0 + 1]
    c = img[:, i0 + 1, j0]
    d = img[:, i0 + 1, j0 + 1]
    out = a * ((1 - fu) * (1 - fv)) + b * ((1 - fu) * fv) + c * (fu * (1 - fv)) + d * (fu * fv)
    return out[0] if squeeze else out


def pixel_grid(H: int, W: int) -> np.ndarray:
    """Flattened (H·W)×2 pixel coordinate matrix, row-major."""
    r, c = np.divmod(np.arange(H * W), W)
    return np.stack([r, c], axis=1).astype(np.float64)


def associate(Q, K, V=None, kappa: float = 0.01) -> Tensor:
    """Attention-weighted pixel coordinates: ``softmax(Q·Kᵀ/κ)·V``.

    ``K`` is an (H·W)×D matrix or a :class:`DescriptorField`; ``V`` defaults
    to the pixel grid of the field.
    """
    Q = T._as_tensor(Q)
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if isinstance(K, DescriptorField):
        if Q.shape[1] != K.P.shape[0]:
            raise T.ShapeError(f"descriptor size {Q.shape[1]} != field size {K.P.shape[0]}")
        logits = T.matmul(T.matmul(Q, K.P), K.flat()) / K.norms()
        if V is None:
            V = pixel_grid(*K.size)
    else:
        K = T._as_tensor(K)
        if Q.shape[1] != K.shape[1]:
            raise T.ShapeError(f"descriptor size {Q.shape[1]} != key size {K.shape[1]}")
        logits = T.matmul(Q, K.T)
    V = T._as_tensor(V)
    if V.shape[0] != logits.shape[1]:
        raise T.ShapeError(f"V has {V.shape[0]} rows, expected {logits.shape[1]}")
    A = T.softmax(logits, axis=1, temperature=kappa)
    return T.matmul(A, V)


def pixel_to_cartesian(uv, eta: np.ndarray, range_res: float) -> tuple[Tensor, Tensor]:
    """Radar-frame positions (N×2) and azimuths (N,) of sub-pixel locations."""
    uv = T._as_tensor(uv)
    eta = np.asarray(eta, dtype=np.float64)
    u, v = uv[:, 0], uv[:, 1]
    j0 = np.clip(np.floor(v.data).astype(int), 0, len(eta) - 2)
    az = eta[j0] + (v - j0.astype(np.float64)) * (eta[j0 + 1] - eta[j0])
    rng = u * range_res
    return T.stack([rng * T.cos(az), rng * T.sin(az)], axis=1), az


def cartesian_to_pixel(d: np.ndarray, eta: np.ndarray, range_res: float) -> np.ndarray:
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    r = np.hypot(d[:, 0], d[:, 1])
    az = np.arctan2(d[:, 1], d[:, 0])
    return np.stack([r / range_res, np.interp(az, eta, np.arange(len(eta)))], axis=1)


@dataclass
class LandmarkSet:
    uv: Tensor  # N×2 sub-pixel (row, col)
    positions: Tensor  # N×2 m, radar frame
    azimuth: Tensor  # N
    credibility: Tensor  # N
    descriptors: Tensor  # N×desc_dim
    doppler: Tensor | None = None
    incomplete: bool = False

    def __len__(self) -> int:
        return self.uv.shape[0]


def detect(feat: Features, config: ExtractorConfig, H_native: int, support: np.ndarray | None = None) -> LandmarkSet:
    """Top-N selection, soft-argmax refinement and per-landmark lookups.

    Candidates are restricted to ``support`` (default: nonzero mask cells).
    Passing the support of the unfused mask keeps fusion from promoting
    cells that only the transported neighbour lit up.
    """
    m = feat.mask
    H, W = m.M.shape
    min_row = first_valid_row(H, H_native)
    valid = m.M > 0 if support is None else support
    if config.peaks_only:
        Ld = feat.L.data
        valid = valid & (Ld >= maximum_filter(Ld, size=3, mode="nearest"))
    cands, incomplete = select_topn(feat.L, config.n_landmarks, config.nms_radius, min_row, valid=valid)
    if len(cands) == 0:
        raise ValueError(f"frame {m.frame}: no landmark candidates")
    uv = subpixel_refine(feat.L, cands, config.patch_size, config.kappa_subpixel, min_row)
    pos, az = pixel_to_cartesian(uv, m.eta, m.range_res)
    c = bilinear_sample(feat.C, uv)
    q = feat.D.sample(uv)
    return LandmarkSet(uv, pos, az, c, q, incomplete=incomplete)


# -- checkpoint files -----------------------------------------------------------------------

def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> Path:
    """Flat little-endian f64 blob at ``path`` plus a JSON manifest at ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers, offset, chunks = [], 0, []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        layers.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        chunks.append(a.tobytes())
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "rasio-checkpoint", "version": 1, "nbytes": offset, "layers": layers}
    manifest.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    man_path = Path(str(path) + ".json")
    for p in (path, man_path):
        if not p.exists():
            raise FileNotFoundError(f"{p}: file not found")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{man_path}: invalid JSON at offset {exc.pos}") from None
    blob = path.read_bytes()
    if len(blob) != manifest.get("nbytes"):
        raise ValueError(f"{path}: expected {manifest.get('nbytes')} bytes, found {len(blob)}")
    arrays = {}
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"])) if layer["shape"] else 1
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=layer["offset"])
        arrays[layer["name"]] = a.reshape(layer["shape"]).astype(np.float64)
    return arrays, manifest
