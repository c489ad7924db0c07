"""Synthetic ground truth from linear elasticity, plus dataset persistence.

The forward map pushes a traction field through the Boussinesq half-space
response in Fourier space to obtain the substrate displacement; a
Tikhonov-regularized per-mode inverse provides the oracle round trip.
Synthetic cells are sums of contractile force dipoles, so every generated
traction field is balanced (zero net force per component).

Boundary conditions are FFT-periodic and the zero-frequency (mean) mode is
zeroed in both directions: the half-space kernel diverges at k=0 and a
balanced traction produces a mean-free displacement.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import read_tensor, write_tensor
from .rng import RngStream


@dataclass(frozen=True)
class ElasticSubstrate:
    """Linear elastic half-space: Young's modulus (Pa), Poisson ratio, grid."""

    young_modulus: float = 10_000.0
    poisson_ratio: float = 0.5
    pixel_size: float = 1.83  # micrometers per grid step
    n: int = 104

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError(f"Young's modulus must be positive, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio <= 0.5:
            raise ValueError(f"Poisson ratio must be in [0, 0.5], got {self.poisson_ratio}")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel size must be positive, got {self.pixel_size}")


def greens_factor(kx: float, ky: float, s: ElasticSubstrate) -> np.ndarray:
    """Fourier-space half-space response matrix for one wave vector.

    G(k) = [2(1+nu)/(E k^3)] * [[(1-nu)k^2 + nu ky^2, -nu kx ky],
                                [-nu kx ky, (1-nu)k^2 + nu kx^2]]
    Symmetric and positive-definite for every k != 0.
    """
    if kx == 0.0 and ky == 0.0:
        raise ValueError("greens_factor is singular at k=0; handle the DC mode separately")
    e, nu = s.young_modulus, s.poisson_ratio
    k2 = kx * kx + ky * ky
    k = np.sqrt(k2)
    pref = 2.0 * (1.0 + nu) / (e * k2 * k)
    return pref * np.array([[(1.0 - nu) * k2 + nu * ky * ky, -nu * kx * ky],
                            [-nu * kx * ky, (1.0 - nu) * k2 + nu * kx * kx]])


def _greens_grid(s: ElasticSubstrate):
    """Vectorized G over the FFT frequency grid; DC entry left as zeros."""
    freqs = 2.0 * np.pi * np.fft.fftfreq(s.n, d=s.pixel_size)
    kx = freqs[None, :]
    ky = freqs[:, None]
    k2 = kx * kx + ky * ky
    nu = s.poisson_ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        pref = 2.0 * (1.0 + nu) / (s.young_modulus * k2 * np.sqrt(k2))
        gxx = pref * ((1.0 - nu) * k2 + nu * ky * ky)
        gyy = pref * ((1.0 - nu) * k2 + nu * kx * kx)
        gxy = pref * (-nu * kx * ky)
    for g in (gxx, gyy, gxy):
        g[0, 0] = 0.0
    if s.n % 2 == 0:
        # the Nyquist line is its own conjugate partner; the off-diagonal
        # coupling is odd in k, so keeping it there would break the real
        # symmetry of the map and make the inverse lossy
        ny = s.n // 2
        gxy[ny, :] = 0.0
        gxy[:, ny] = 0.0
    return gxx, gyy, gxy


def forward_displacement(f: np.ndarray, s: ElasticSubstrate) -> np.ndarray:
    """Displacement field (micrometers) induced by a traction field (Pa).

    Per-mode u_hat = G(k) f_hat; the DC mode is zeroed, so the result is
    mean-free per component.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (2, s.n, s.n):
        raise ValueError(f"expected traction of shape (2, {s.n}, {s.n}), got {f.shape}")
    gxx, gyy, gxy = _greens_grid(s)
    fx = np.fft.fft2(f[0])
    fy = np.fft.fft2(f[1])
    ux = gxx * fx + gxy * fy
    uy = gxy * fx + gyy * fy
    u = np.stack([np.fft.ifft2(ux), np.fft.ifft2(uy)])
    return np.ascontiguousarray(u.real)


def fttc_inverse(u: np.ndarray, s: ElasticSubstrate, lam: float = 0.0) -> np.ndarray:
    """Tikhonov-regularized per-mode inversion of the forward map.

    f_hat = (G^T G + lam^2 I)^-1 G^T u_hat, DC mode zeroed.  lam=0 is exact
    on mean-free fields because G is invertible for every k != 0.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (2, s.n, s.n):
        raise ValueError(f"expected displacement of shape (2, {s.n}, {s.n}), got {u.shape}")
    if lam < 0:
        raise ValueError("regularization strength must be >= 0")
    gxx, gyy, gxy = _greens_grid(s)
    ux = np.fft.fft2(u[0])
    uy = np.fft.fft2(u[1])
    # A = G^T G + lam^2 I (G symmetric), then solve A f = G u per mode
    axx = gxx * gxx + gxy * gxy + lam * lam
    ayy = gxy * gxy + gyy * gyy + lam * lam
    axy = gxy * (gxx + gyy)
    bx = gxx * ux + gxy * uy
    by = gxy * ux + gyy * uy
    det = axx * ayy - axy * axy
    det[0, 0] = 1.0  # DC row is zeroed below
    fx = (ayy * bx - axy * by) / det
    fy = (axx * by - axy * bx) / det
    fx[0, 0] = 0.0
    fy[0, 0] = 0.0
    f = np.stack([np.fft.ifft2(fx), np.fft.ifft2(fy)])
    return np.ascontiguousarray(f.real)


# -- synthetic tractions -------------------------------------------------

# per-type multiplier on the dipole amplitude range, keeping metadata informative
CELL_TYPE_AMPLITUDE_SCALE = {1: 0.40, 2: 1.00, 3: 0.70, 4: 0.55}


@dataclass(frozen=True)
class TractionGenConfig:
    dipoles: tuple[int, int] = (2, 8)          # inclusive range of dipole count
    amplitude: tuple[float, float] = (100.0, 2000.0)  # Pa, before type scaling
    spot_width: tuple[float, float] = (2.0, 6.0)      # grid steps
    separation: tuple[float, float] = (8.0, 30.0)     # grid steps
    cell_type_probs: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)


def _periodic_gaussian(n: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    dx = (idx[None, :] - cx + n / 2.0) % n - n / 2.0
    dy = (idx[:, None] - cy + n / 2.0) % n - n / 2.0
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def sample_synthetic_traction(rng: RngStream, n: int,
                              cfg: TractionGenConfig = TractionGenConfig()):
    """Draw one balanced traction field and its cell-type index.

    Each dipole is a pair of Gaussian traction spots pulling toward each
    other; the per-type amplitude scaling makes the metadata informative.
    Returns (traction 2xNxN in Pa, cell_type in 1..4).
    """
    probs = np.asarray(cfg.cell_type_probs, dtype=np.float64)
    probs = probs / probs.sum()
    cell_type = int(np.searchsorted(np.cumsum(probs), rng.uniform()) + 1)
    amp_scale = CELL_TYPE_AMPLITUDE_SCALE[cell_type]

    f = np.zeros((2, n, n), dtype=np.float64)
    m = int(rng.integers(cfg.dipoles[0], cfg.dipoles[1] + 1))
    for _ in range(m):
        cx, cy = rng.uniform((2,), 0.2 * n, 0.8 * n)
        theta = rng.uniform(high=2.0 * np.pi)
        sep = rng.uniform(low=cfg.separation[0], high=cfg.separation[1])
        sigma = rng.uniform(low=cfg.spot_width[0], high=cfg.spot_width[1])
        amp = amp_scale * rng.uniform(low=cfg.amplitude[0], high=cfg.amplitude[1])
        dx, dy = np.cos(theta), np.sin(theta)
        for sign in (+1.0, -1.0):
            spot = _periodic_gaussian(n, cx + sign * 0.5 * sep * dx,
                                      cy + sign * 0.5 * sep * dy, sigma)
            # contractile: the spot pulls back toward the dipole center
            f[0] += -sign * amp * dx * spot
            f[1] += -sign * amp * dy * spot
    # exact force balance per component
    f -= f.mean(axis=(1, 2), keepdims=True)
    return f, cell_type


# -- dataset persistence -------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    cell_type: int
    u_path: str
    f_path: str
    split: str


@dataclass
class DatasetManifest:
    n: int
    substrate: ElasticSubstrate
    u0_um: float
    f0_pa: float
    sigma_u2_mean: float
    seed: int
    samples: list[SampleEntry] = field(default_factory=list)

    def split(self, name: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "substrate": {"e_pa": self.substrate.young_modulus,
                          "nu": self.substrate.poisson_ratio,
                          "pixel_size_um": self.substrate.pixel_size},
            "u0_um": self.u0_um,
            "f0_pa": self.f0_pa,
            "sigma_u2_mean": self.sigma_u2_mean,
            "seed": self.seed,
            "samples": [asdict(s) for s in self.samples],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        sub = ElasticSubstrate(raw["substrate"]["e_pa"], raw["substrate"]["nu"],
                               raw["substrate"]["pixel_size_um"], raw["n"])
        return cls(n=raw["n"], substrate=sub, u0_um=raw["u0_um"], f0_pa=raw["f0_pa"],
                   sigma_u2_mean=raw["sigma_u2_mean"], seed=raw["seed"],
                   samples=[SampleEntry(**s) for s in raw["samples"]])

    def save(self, directory):
        Path(directory, "manifest.json").write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        return cls.from_json(Path(directory, "manifest.json").read_text(encoding="utf-8"))


def mean_field_variance(fields: np.ndarray) -> float:
    """Mean over samples of the per-sample variance over all 2N^2 entries."""
    fields = np.asarray(fields)
    if fields.ndim != 4 or fields.shape[0] == 0:
        raise ValueError("expected a non-empty stack of 2xNxN fields")
    return float(np.mean(fields.reshape(fields.shape[0], -1).var(axis=1)))


def generate_dataset(out_dir, counts: tuple[int, int, int],
                     substrate: ElasticSubstrate = ElasticSubstrate(),
                     seed: int = 0,
                     gen_cfg: TractionGenConfig = TractionGenConfig(),
                     noise_std_um: float = 0.0) -> DatasetManifest:
    """Write a train/val/test dataset of paired (u, f) TFT1 files + manifest.

    Per sample: draw a balanced traction, push it through the elastic forward
    map, optionally add measurement noise to u (off by default).  u0 is the
    max absolute displacement component over the training split; f0 is fixed
    at 1000 Pa.
    """
    if min(counts) < 1:
        raise ValueError(f"all split counts must be >= 1, got {counts}")
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    root = RngStream(seed, "dataset")

    splits = [("train", counts[0]), ("val", counts[1]), ("test", counts[2])]
    entries, train_u = [], []
    idx = 0
    for split, count in splits:
        for _ in range(count):
            sid = f"s{idx:05d}"
            srng = root.child(f"sample/{sid}")
            f, cell_type = sample_synthetic_traction(srng, substrate.n, gen_cfg)
            u = forward_displacement(f, substrate)
            if noise_std_um > 0.0:
                u = u + srng.child("noise").normal(u.shape, 0.0, noise_std_um)
            u_path = f"samples/{sid}_u.tft"
            f_path = f"samples/{sid}_f.tft"
            write_tensor(out_dir / u_path, u)
            write_tensor(out_dir / f_path, f)
            entries.append(SampleEntry(sid, cell_type, u_path, f_path, split))
            if split == "train":
                train_u.append(u)
            idx += 1

    train_u = np.stack(train_u)
    u0 = float(np.max(np.abs(train_u)))
    sigma = mean_field_variance(train_u / u0)
    manifest = DatasetManifest(n=substrate.n, substrate=substrate, u0_um=u0,
                               f0_pa=1000.0, sigma_u2_mean=sigma, seed=seed,
                               samples=entries)
    manifest.save(out_dir)
    return manifest


def normalize_fields(x: np.ndarray, manifest: DatasetManifest, kind: str,
                     direction: str = "to_dimensionless") -> np.ndarray:
    """Scale between physical and dimensionless units (u/u0, f/f0)."""
    if kind not in ("u", "f"):
        raise ValueError(f"kind must be 'u' or 'f', got {kind!r}")
    scale = manifest.u0_um if kind == "u" else manifest.f0_pa
    if not scale > 0:
        raise ValueError(f"missing/invalid normalization constant for {kind!r}: {scale}")
    x = np.asarray(x)
    if direction == "to_dimensionless":
        return x / scale
    if direction == "to_physical":
        return x * scale
    raise ValueError(f"unknown direction {direction!r}")


class Dataset:
    """In-memory view of a generated dataset, dimensionless fields per split."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.manifest = DatasetManifest.load(directory)

    def load_split(self, split: str, dtype=np.float64):
        entries = self.manifest.split(split)
        if not entries:
            raise ValueError(f"dataset at {self.directory} has no {split!r} split")
        u = np.stack([read_tensor(self.directory / e.u_path) for e in entries])
        f = np.stack([read_tensor(self.directory / e.f_path) for e in entries])
        u = normalize_fields(u, self.manifest, "u").astype(dtype)
        f = normalize_fields(f, self.manifest, "f").astype(dtype)
        cell_types = np.array([e.cell_type for e in entries], dtype=np.int64)
        return u, f, cell_types
