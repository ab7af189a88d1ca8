"""Color-biased shapes domain: entangled latent decoder, soft rasterizer,
analytic pixel probes, and the ideal biased data distribution.

The decoder is an analytic stand-in for a generative model trained on data
where red triangles and blue squares dominate: color and shape both load on
one shared latent direction, so a prior draw lands in a majority combination
about 98% of the time, while off-diagonal combinations remain reachable at
moderate latent norms.

Geometry: a shape is a 4-vertex convex polygon interpolating an equilateral
triangle (apex vertex doubled) into a square, rasterized from its exact
signed distance field through a logistic edge profile with 2x supersampling.
Out-of-distribution latents blend in a high-frequency noise field whose
texture varies smoothly with the latent (a fixed bank of basis textures
mixed by latent projections), keeping every pixel probe differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .scoring import ProbePair
from .validation import as_float_vector, as_image

LATENT_DIM = 6

RED_RGB = np.array([0.86, 0.12, 0.12])
BLUE_RGB = np.array([0.12, 0.12, 0.86])
ALPHA_CEILING = 1.0 - 0.12          # both anchors keep min channel at 0.12

EDGE_SOFTNESS_PX = 0.35
SUPERSAMPLE = 2
SHAPE_BASE_FRACTION = 0.17

# decoder entanglement: color/shape share direction W with gain BIAS_GAIN,
# plus independent components along V_COLOR / V_SHAPE with gain ENTANGLE_EPS.
# BIAS_GAIN / ENTANGLE_EPS = 22.5 puts the majority fraction at 0.98.
BIAS_GAIN = 67.5
ENTANGLE_EPS = 3.0
W_DIR = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]) / math.sqrt(3.0)
V_COLOR = np.array([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]) / math.sqrt(2.0)
V_SHAPE = np.array([1.0, 1.0, -2.0, 0.0, 0.0, 0.0]) / math.sqrt(6.0)

# decoder parameter ranges; the decoder's scale window is narrower than the
# full ShapeParams range so rendered shapes stay large enough for the
# isoperimetric probe to separate triangle from square at the loop resolution
DECODER_SCALE_LO = 1.1
DECODER_SCALE_HI = 1.9
NOISE_KAPPA = 4.0

# triangle circumradius relative to the square half-extent: partially evens
# out the area difference and keeps triangle corners coarse enough for the
# perimeter estimate
TRIANGLE_RATIO = 1.35

NOISE_BASIS_COUNT = 8
NOISE_BASIS_SEED = 714025
NOISE_MIX_SEED = 151771
NOISE_FIELD_SCALE = 0.5

Q_TRIANGLE = math.pi * math.sqrt(3.0) / 9.0     # exact isoperimetric quotients
Q_SQUARE = math.pi / 4.0
# centering/scaling of the shape measure, calibrated to the soft-rendered
# quotients at 64x64 and reference scale 1.5 so that rendered triangles map
# near -0.5 and rendered squares near +0.5 (soft rendering biases both
# quotients upward relative to the ideal polygons)
Q_MID = 0.7468
Q_SPAN = 0.1598

COVERAGE_LO, COVERAGE_LO_WIDTH = 0.03, 0.008    # quality bump shoulders
COVERAGE_HI, COVERAGE_HI_WIDTH = 0.60, 0.05
NOISE_NORM = 0.5

BIAS_LEVELS = (0.80, 0.85, 0.90, 0.95, 0.98)


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


@lru_cache(maxsize=8)
def _noise_mix_directions() -> np.ndarray:
    rng = np.random.default_rng(NOISE_MIX_SEED)
    dirs = rng.standard_normal((NOISE_BASIS_COUNT, LATENT_DIM))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@lru_cache(maxsize=16)
def _noise_basis(resolution: int) -> np.ndarray:
    rng = np.random.default_rng(NOISE_BASIS_SEED)
    fields = rng.standard_normal((NOISE_BASIS_COUNT, resolution, resolution, 3))
    return NOISE_FIELD_SCALE * fields


@dataclass
class ShapeParams:
    """Decoded rendering parameters."""

    color: float                  # 0 = red, 1 = blue
    shape: float                  # 0 = triangle, 1 = square
    rotation: float               # radians in [0, 2*pi)
    scale: float                  # relative size in [0.5, 2.0]
    noise_amp: float = 0.0        # out-of-distribution splatter amplitude
    noise_mix: tuple[float, ...] = (0.0,) * NOISE_BASIS_COUNT


def decode(z, bias_gain: float = BIAS_GAIN) -> ShapeParams:
    """Latent vector to rendering parameters through the entangled decoder."""
    z = as_float_vector(z, "z")
    if z.shape[0] != LATENT_DIM:
        raise ConfigurationError(f"latent must have dimension {LATENT_DIM}")
    u = float(z @ W_DIR)
    color = float(_logistic(bias_gain * u + ENTANGLE_EPS * float(z @ V_COLOR)))
    shape = float(_logistic(bias_gain * u + ENTANGLE_EPS * float(z @ V_SHAPE)))
    rotation = 2.0 * math.pi * float(_logistic(z[3]))
    scale = DECODER_SCALE_LO + (DECODER_SCALE_HI - DECODER_SCALE_LO) * float(_logistic(z[4]))
    noise_amp = _softplus(float(z @ z) / LATENT_DIM - NOISE_KAPPA)
    mix = tuple((_noise_mix_directions() @ z / math.sqrt(NOISE_BASIS_COUNT)).tolist())
    return ShapeParams(color=color, shape=shape, rotation=rotation % (2.0 * math.pi),
                       scale=scale, noise_amp=noise_amp, noise_mix=mix)


def morph_vertices(shape_mix: float, half_extent: float, rotation: float) -> np.ndarray:
    """CCW 4-vertex polygon interpolating triangle (doubled apex) to square."""
    r = TRIANGLE_RATIO * half_extent
    h = half_extent
    tri = np.array([[0.0, r], [0.0, r],
                    [-math.sqrt(3.0) / 2.0 * r, -0.5 * r],
                    [math.sqrt(3.0) / 2.0 * r, -0.5 * r]])
    sq = np.array([[h, h], [-h, h], [-h, -h], [h, -h]])
    verts = (1.0 - shape_mix) * tri + shape_mix * sq
    c, s = math.cos(rotation), math.sin(rotation)
    return verts @ np.array([[c, -s], [s, c]]).T


def polygon_sdf(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Exact signed distance to a convex CCW polygon; negative inside.

    Zero-length edges (doubled vertices) contribute their vertex distance.
    """
    px, py = np.broadcast_arrays(px, py)
    n = len(verts)
    d2 = np.full(px.shape, np.inf)
    inside = np.ones(px.shape, dtype=bool)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        ee = ex * ex + ey * ey
        wx, wy = px - ax, py - ay
        if ee < 1e-18:
            d2 = np.minimum(d2, wx * wx + wy * wy)
            continue
        t = np.clip((wx * ex + wy * ey) / ee, 0.0, 1.0)
        dx, dy = wx - t * ex, wy - t * ey
        d2 = np.minimum(d2, dx * dx + dy * dy)
        inside &= (ex * wy - ey * wx) >= 0.0
    return np.where(inside, -np.sqrt(d2), np.sqrt(d2))


def polygon_quotient(verts: np.ndarray) -> float:
    """Exact isoperimetric quotient 4*pi*A/P^2 of a polygon (shoelace)."""
    x, y = verts[:, 0], verts[:, 1]
    area = 0.5 * abs(float(x @ np.roll(y, -1) - y @ np.roll(x, -1)))
    perim = float(np.hypot(np.diff(x, append=x[0]), np.diff(y, append=y[0])).sum())
    if perim <= 0.0:
        return 0.0
    return 4.0 * math.pi * area / perim ** 2


def render_shape_alpha(shape_mix: float, rotation: float, scale: float,
                       resolution: int) -> np.ndarray:
    """Supersampled foreground coverage of the morph polygon.

    The distance field is only evaluated inside a padded bounding box around
    the (centered) polygon; outside it the logistic tail is below 1e-10 and
    coverage is written as exact zero.
    """
    ss = SUPERSAMPLE
    half = SHAPE_BASE_FRACTION * resolution * scale
    verts = morph_vertices(shape_mix, half, rotation)
    reach = float(np.hypot(verts[:, 0], verts[:, 1]).max()) + 8.0
    center = resolution / 2.0
    lo = max(0, int(math.floor(center - reach)))
    hi = min(resolution, int(math.ceil(center + reach)))
    alpha = np.zeros((resolution, resolution))
    if lo >= hi:
        return alpha
    n = hi - lo
    coords = (np.arange(lo * ss, hi * ss) + 0.5) / ss
    px = coords[None, :] - center
    py = center - coords[:, None]
    d = polygon_sdf(px, py, verts)
    block = _logistic(-d / EDGE_SOFTNESS_PX)
    if ss > 1:
        block = block.reshape(n, ss, n, ss).mean(axis=(1, 3))
    alpha[lo:hi, lo:hi] = block
    return alpha


def render(params: ShapeParams, resolution: int = 64) -> np.ndarray:
    """Rasterize to an (res, res, 3) float image in [0, 1] on a white ground."""
    if resolution < 8:
        raise ConfigurationError("render resolution must be at least 8")
    alpha = render_shape_alpha(params.shape, params.rotation, params.scale, resolution)
    fg = RED_RGB + params.color * (BLUE_RGB - RED_RGB)
    img = alpha[..., None] * fg + (1.0 - alpha[..., None])
    if params.noise_amp > 0.0 and any(w != 0.0 for w in params.noise_mix):
        basis = _noise_basis(resolution)
        mix = np.tensordot(np.asarray(params.noise_mix), basis, axes=(0, 0))
        img = img + params.noise_amp * mix
    return np.clip(img, 0.0, 1.0)


def _box_blur3(field: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication."""
    padded = np.pad(field, 1, mode="edge")
    out = np.zeros_like(field)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + field.shape[0], dx:dx + field.shape[1]]
    return out / 9.0


def _smoothstep5(x: np.ndarray) -> np.ndarray:
    """Quintic smoothstep; suppresses small values, fixes 0 and 1, C2 smooth."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def foreground_alpha(image) -> np.ndarray:
    """Recover foreground coverage from pixels.

    Both color anchors keep the minimum channel at 0.12, so on a white
    ground 1 - min(rgb) equals coverage times 0.88 for noiseless renders.
    A 3x3 blur plus a quintic smoothstep suppress low-amplitude pixel noise
    so the area/perimeter probes stay meaningful on mildly noisy images,
    while remaining smooth functions of the pixels.
    """
    img = as_image(image)
    raw = (1.0 - _box_blur3(img.min(axis=2))) / ALPHA_CEILING
    return _smoothstep5(raw)


def is_degenerate(image) -> bool:
    """True when the image has effectively no foreground mass."""
    return float(foreground_alpha(image).sum()) < 1e-6


def _fg_channel_mean(image, channel: int) -> float:
    img = as_image(image)
    alpha = foreground_alpha(img)
    mass = float(alpha.sum())
    if mass < 1e-6:
        return 0.0
    return float((alpha * img[..., channel]).sum() / mass)


def probe_redness(image) -> float:
    """Color axis: -1 is red, +1 is blue (foreground-weighted B minus R)."""
    if is_degenerate(image):
        return 0.0
    return float(np.clip(_fg_channel_mean(image, 2) - _fg_channel_mean(image, 0),
                         -1.0, 1.0))


def soft_isoperimetric_quotient(image) -> float:
    """4*pi*A/P^2 from soft coverage area and its finite-difference perimeter.

    The perimeter uses the cell-centered finite-difference gradient (average
    of the four pixel-pair differences per 2x2 cell), which is isotropic
    enough that the quotient stays rotation-invariant.
    """
    alpha = foreground_alpha(image)
    area = float(alpha.sum())
    a00 = alpha[:-1, :-1]
    a01 = alpha[:-1, 1:]
    a10 = alpha[1:, :-1]
    a11 = alpha[1:, 1:]
    gx = 0.5 * (a01 - a00 + a11 - a10)
    gy = 0.5 * (a10 - a00 + a11 - a01)
    perim = float(np.sqrt(gx * gx + gy * gy).sum())
    if perim < 1e-9:
        return 0.0
    return 4.0 * math.pi * area / perim ** 2


def probe_squareness(image) -> float:
    """Shape axis: negative for triangle-like, positive for square-like."""
    if is_degenerate(image):
        return 0.0
    q = soft_isoperimetric_quotient(image)
    return float(np.clip((q - Q_MID) / Q_SPAN, -1.0, 1.0))


def quality_coverage(image) -> float:
    """Smooth bump rewarding a foreground fraction between the shoulders."""
    frac = float(foreground_alpha(image).mean())
    lo = _logistic((frac - COVERAGE_LO) / COVERAGE_LO_WIDTH)
    hi = _logistic((COVERAGE_HI - frac) / COVERAGE_HI_WIDTH)
    return float(lo * hi)


def quality_noise(image) -> float:
    """Normalized mean squared Laplacian of the grayscale image."""
    gray = as_image(image).mean(axis=2)
    lap = (4.0 * gray[1:-1, 1:-1] - gray[:-2, 1:-1] - gray[2:, 1:-1]
           - gray[1:-1, :-2] - gray[1:-1, 2:])
    return float(min(1.0, (lap * lap).mean() / NOISE_NORM))


def probe_quality(image) -> float:
    """Image quality in [0, 1]: rewards covered frames, punishes splatter."""
    return float(np.clip(quality_coverage(image) - quality_noise(image), 0.0, 1.0))


def quality_probe_pair() -> ProbePair:
    return ProbePair(positive=quality_coverage, negative=quality_noise)


def redness_probe_pair() -> ProbePair:
    def _pos(image):
        return 0.0 if is_degenerate(image) else _fg_channel_mean(image, 2)

    def _neg(image):
        return 0.0 if is_degenerate(image) else _fg_channel_mean(image, 0)

    return ProbePair(positive=_pos, negative=_neg)


def squareness_probe_pair() -> ProbePair:
    def _score(image):
        return 0.5 * probe_squareness(image)

    return ProbePair(positive=lambda img: 0.5 + _score(img),
                     negative=lambda img: 0.5 - _score(img))


def label_from_m2(m2: float, tau: float = 0.01) -> str:
    """'square' above +tau, 'triangle' below -tau, else 'ambiguous'."""
    if m2 > tau:
        return "square"
    if m2 < -tau:
        return "triangle"
    return "ambiguous"


class ShapesGenerator:
    """Generator contract for the shapes domain: latent in, image out."""

    latent_dim = LATENT_DIM

    def __init__(self, resolution: int = 64, bias_gain: float = BIAS_GAIN):
        self.resolution = int(resolution)
        self.bias_gain = float(bias_gain)

    def image(self, theta) -> np.ndarray:
        return render(decode(theta, self.bias_gain), self.resolution)

    def prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((int(n), LATENT_DIM))

    def at_resolution(self, resolution: int) -> "ShapesGenerator":
        return ShapesGenerator(resolution=resolution, bias_gain=self.bias_gain)


def sample_latents(n: int, rng: np.random.Generator) -> np.ndarray:
    """Standard normal prior draws for calibration."""
    return rng.standard_normal((int(n), LATENT_DIM))


@dataclass
class RealDataset:
    """Images drawn from the ideal biased distribution with true labels."""

    images: np.ndarray           # (n, res, res, 3) float32
    shape_labels: np.ndarray     # (n,) 0 = triangle, 1 = square
    color_labels: np.ndarray     # (n,) 0 = red, 1 = blue

    def __len__(self) -> int:
        return len(self.shape_labels)

    @property
    def group_names(self) -> list[str]:
        return [group_name(s, c) for s, c in zip(self.shape_labels, self.color_labels)]


def group_name(shape_label: int, color_label: int) -> str:
    shape = "square" if shape_label else "triangle"
    color = "blue" if color_label else "red"
    return f"{color}_{shape}"


MINORITY_GROUPS = ("blue_triangle", "red_square")


def sample_real(b: float, n: int, seed: int = 0, resolution: int = 128) -> RealDataset:
    """Draw from the ideal distribution: majority pairs (red triangle, blue
    square) with probability b, minority pairs otherwise; rotation uniform
    over the full circle, scale uniform in [0.5, 2.0]."""
    if not (0.0 < b < 1.0):
        raise ConfigurationError(f"bias must lie strictly inside (0, 1), got {b}")
    rng = np.random.default_rng(seed)
    majority = rng.random(n) < b
    shapes = rng.integers(0, 2, size=n)           # 0 triangle, 1 square
    colors = np.where(majority, shapes, 1 - shapes)   # majority: red tri / blue sq
    rotations = np.deg2rad(rng.uniform(0.0, 360.0, size=n))
    scales = rng.uniform(0.5, 2.0, size=n)
    images = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    for i in range(n):
        params = ShapeParams(color=float(colors[i]), shape=float(shapes[i]),
                             rotation=float(rotations[i]), scale=float(scales[i]))
        images[i] = render(params, resolution)
    return RealDataset(images=images, shape_labels=shapes.astype(int),
                       color_labels=colors.astype(int))


def measured_majority_fraction(n: int = 100_000, seed: int = 0,
                               bias_gain: float = BIAS_GAIN) -> float:
    """Monte Carlo check of the decoder's majority-combination rate."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, LATENT_DIM))
    arg_c = bias_gain * (z @ W_DIR) + ENTANGLE_EPS * (z @ V_COLOR)
    arg_s = bias_gain * (z @ W_DIR) + ENTANGLE_EPS * (z @ V_SHAPE)
    return float(np.mean((arg_c > 0) == (arg_s > 0)))
