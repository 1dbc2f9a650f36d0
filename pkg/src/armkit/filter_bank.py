"""Anisotropic Gaussian and difference-of-Gaussians filter banks.

A Gaussian atom is the bivariate normal density with covariance
``Sigma = gamma**2 * U(theta) @ diag(sigma1**2, sigma2**2) @ U(theta).T``
evaluated on a k x k integer grid centred on the middle pixel and
renormalized to sum to one. Grid offsets are ``(dx, dy) = (col - c, row - c)``,
so ``theta`` rotates counter-clockwise from the column axis.

Banks are drawn with :class:`SplitMix64` so they are reproducible bit for
bit from the seed alone; the draw order is documented on :func:`sample_bank`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import aatd
from .errors import ConfigurationError, DimensionError

THETA_RANGE = (0.0, math.pi)
GAMMA_RANGE = (0.5, 1.5)
SIGMA_RANGE = (0.4, 1.6)

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood 2014) over Python ints.

    ``state += 0x9E3779B97F4A7C15``; the output is the state mixed by
    ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
    z *= 0x94D049BB133111EB; z ^= z >> 31`` (all mod 2**64).
    ``uniform()`` takes the top 53 bits: ``(z >> 11) * 2**-53`` in [0, 1).
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)

    def randbelow(self, n: int) -> int:
        return min(int(self.uniform() * n), n - 1)


@dataclass(frozen=True)
class KernelSpec:
    theta: float
    gamma: float
    sigma1: float
    sigma2: float
    k: int = 3

    def __post_init__(self):
        for name in ("gamma", "sigma1", "sigma2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigurationError(f"KernelSpec.{name} must be > 0, got {value}")
        if not math.isfinite(self.theta):
            raise ConfigurationError(f"KernelSpec.theta must be finite, got {self.theta}")
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigurationError(f"KernelSpec.k must be an odd integer >= 3, got {self.k}")

    def covariance(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        lam = np.diag([self.sigma1**2, self.sigma2**2])
        return self.gamma**2 * rot @ lam @ rot.T

    @classmethod
    def sample(cls, rng: SplitMix64, k: int) -> "KernelSpec":
        return cls(
            theta=rng.uniform(*THETA_RANGE),
            gamma=rng.uniform(*GAMMA_RANGE),
            sigma1=rng.uniform(*SIGMA_RANGE),
            sigma2=rng.uniform(*SIGMA_RANGE),
            k=k,
        )


@dataclass(frozen=True)
class Kernel:
    weights: np.ndarray
    kind: Literal["gaussian", "dog"]

    @property
    def k(self) -> int:
        return self.weights.shape[0]


def grid_offsets(k: int) -> tuple[np.ndarray, np.ndarray]:
    c = (k - 1) / 2
    rows, cols = np.mgrid[0:k, 0:k].astype(np.float64)
    return cols - c, rows - c


def gaussian_kernel(spec: KernelSpec) -> Kernel:
    sigma = spec.covariance()
    prec = np.linalg.inv(sigma)
    dx, dy = grid_offsets(spec.k)
    quad = prec[0, 0] * dx * dx + 2 * prec[0, 1] * dx * dy + prec[1, 1] * dy * dy
    pdf = np.exp(-0.5 * quad) / (2 * math.pi * math.sqrt(np.linalg.det(sigma)))
    weights = pdf / pdf.sum()
    weights.setflags(write=False)
    return Kernel(weights, "gaussian")


def dog_kernel(spec_i: KernelSpec, spec_j: KernelSpec) -> Kernel:
    """``gaussian(spec_i) - gaussian(spec_j)``; sums to zero."""
    if spec_i.k != spec_j.k:
        raise DimensionError(f"DoG specs differ in size: {spec_i.k} vs {spec_j.k}")
    if np.allclose(spec_i.covariance(), spec_j.covariance(), rtol=1e-12, atol=1e-12):
        raise ConfigurationError("DoG specs give the same covariance; the atom would be all zeros")
    weights = gaussian_kernel(spec_i).weights - gaussian_kernel(spec_j).weights
    weights.setflags(write=False)
    return Kernel(weights, "dog")


def isotropic_spec(sigma: float = 1.0, k: int = 3) -> KernelSpec:
    return KernelSpec(theta=0.0, gamma=1.0, sigma1=sigma, sigma2=sigma, k=k)


@dataclass(frozen=True)
class FilterBank:
    atoms: tuple[Kernel, ...]
    seed: int | None
    specs: tuple[dict, ...] = field(default=())

    def __post_init__(self):
        if len(self.atoms) < 2:
            raise ConfigurationError(f"a filter bank needs n >= 2 atoms, got {len(self.atoms)}")
        if len({a.k for a in self.atoms}) != 1:
            raise DimensionError("all atoms in a bank must share one kernel size")
        if not any(a.kind == "gaussian" for a in self.atoms):
            raise ConfigurationError("a filter bank needs at least one gaussian atom")

    @property
    def n(self) -> int:
        return len(self.atoms)

    @property
    def k(self) -> int:
        return self.atoms[0].k

    @property
    def composition(self) -> dict[str, int]:
        kinds = [a.kind for a in self.atoms]
        return {"gaussian": kinds.count("gaussian"), "dog": kinds.count("dog")}

    def stack(self) -> np.ndarray:
        return np.stack([a.weights for a in self.atoms])


def default_dog_count(n: int) -> int:
    return n // 4


def sample_bank(seed: int, n: int = 8, k: int = 3, dog_count: int | None = None) -> FilterBank:
    """Draw a bank of ``n - dog_count`` Gaussian and ``dog_count`` DoG atoms.

    Draw order from ``SplitMix64(seed)``: for every Gaussian atom, theta,
    gamma, sigma1, sigma2 (each one uniform draw in its interval). Then for
    every DoG atom, an index ``i`` into the Gaussian atoms and a second
    distinct index ``j`` (one draw over the remaining ``g - 1``). With a
    single Gaussian atom, ``j`` is replaced by a freshly drawn spec. The pair
    is ordered so the atom with the larger centre weight comes first, giving
    a positive centre and negative surround.
    """
    if dog_count is None:
        dog_count = default_dog_count(n)
    if n < 2:
        raise ConfigurationError(f"n must be >= 2, got {n}")
    if not 0 <= dog_count < n:
        raise ConfigurationError(f"dog_count must satisfy 0 <= dog_count < n, got dog_count={dog_count}, n={n}")
    rng = SplitMix64(seed)
    g = n - dog_count
    gauss_specs = [KernelSpec.sample(rng, k) for _ in range(g)]
    atoms = [gaussian_kernel(s) for s in gauss_specs]
    specs: list[dict] = [{"kind": "gaussian", **asdict(s)} for s in gauss_specs]
    c = k // 2
    for _ in range(dog_count):
        i = rng.randbelow(g)
        if g >= 2:
            j = rng.randbelow(g - 1)
            j = j + 1 if j >= i else j
            a, b = gauss_specs[i], gauss_specs[j]
        else:
            a, b = gauss_specs[i], KernelSpec.sample(rng, k)
        if gaussian_kernel(a).weights[c, c] < gaussian_kernel(b).weights[c, c]:
            a, b = b, a
        atoms.append(dog_kernel(a, b))
        specs.append({"kind": "dog", "plus": asdict(a), "minus": asdict(b)})
    return FilterBank(tuple(atoms), seed, tuple(specs))


def bank_from_specs(specs, seed: int | None = None) -> FilterBank:
    atoms = []
    for entry in specs:
        if entry["kind"] == "gaussian":
            fields = {key: entry[key] for key in ("theta", "gamma", "sigma1", "sigma2", "k")}
            atoms.append(gaussian_kernel(KernelSpec(**fields)))
        elif entry["kind"] == "dog":
            atoms.append(dog_kernel(KernelSpec(**entry["plus"]), KernelSpec(**entry["minus"])))
        else:
            raise ConfigurationError(f"unknown atom kind {entry['kind']!r}")
    return FilterBank(tuple(atoms), seed, tuple(specs))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_bank(bank: FilterBank, path) -> tuple[Path, Path]:
    """Write the n x k x k AATD dump and a JSON sidecar next to it."""
    dump = aatd.write(path, bank.stack())
    meta = {
        "seed": bank.seed,
        "n": bank.n,
        "k": bank.k,
        "composition": bank.composition,
        "kinds": [a.kind for a in bank.atoms],
        "specs": list(bank.specs),
    }
    side = sidecar_path(path)
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return dump, side


def load_bank(path) -> FilterBank:
    """Rebuild a bank from its sidecar specs and check it against the dump."""
    meta = json.loads(sidecar_path(path).read_text())
    bank = bank_from_specs(meta["specs"], meta.get("seed"))
    dumped = aatd.read(path)
    if dumped.shape != (bank.n, bank.k, bank.k) or not np.allclose(dumped, bank.stack(), atol=1e-6):
        raise ConfigurationError(f"bank dump {path} does not match its sidecar specs")
    return bank
