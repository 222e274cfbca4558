"""Synthetic prostate-image generator.

Latent spatial structure comes from a Matern Gaussian random field sampled
per subject; binary cancer labels arise by thresholding a latent probit
variable, ordinal grades by cutting a pooled latent score at empirical
percentiles.  Features are class/zone-conditional Gaussians plus shared
multi-resolution region shifts and a subject-level offset, so that learners
trained at different grid resolutions see genuinely different structure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import gamma as gamma_fn
from scipy.special import kv, ndtri

from mrsl.data import Dataset, SubjectImage, standardize_coordinates
from mrsl.multires import region_index
from mrsl.rng import make_rng

_JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class MaternParams:
    """Marginal variance, range (standardized-coordinate units), smoothness."""

    sigma2: float
    phi: float
    nu: float

    def __post_init__(self):
        for name in ("sigma2", "phi", "nu"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")


def matern_cov_from_distance(dist, params: MaternParams):
    """Matern covariance at Euclidean distance(s) ``dist``.

    With u = 2*sqrt(nu)*d/phi the value is sigma2 for u = 0 and otherwise
    sigma2 / (2^(nu-1) Gamma(nu)) * u^nu * K_nu(u), K_nu the modified Bessel
    function of the second kind.
    """
    d = np.asarray(dist, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and non-negative")
    u = (2.0 * math.sqrt(params.nu) / params.phi) * d
    coef = params.sigma2 / (2.0 ** (params.nu - 1.0) * gamma_fn(params.nu))
    out = np.full(u.shape, params.sigma2)
    pos = u > 0
    with np.errstate(invalid="ignore", over="ignore"):
        vals = coef * u[pos] ** params.nu * kv(params.nu, u[pos])
    # kv underflows to an exact 0 for large u, which is the right limit.  At
    # distances so tiny that u**nu underflows first, the 0*inf product is NaN
    # while the true value is sigma2 to machine precision.
    out[pos] = np.where(np.isfinite(vals), vals, params.sigma2)
    if np.ndim(dist) == 0:
        return float(out)
    return out


def matern_cov(s1, s2, params: MaternParams):
    """Covariance between points (or stacks of points) s1 and s2."""
    a = np.asarray(s1, dtype=float)
    b = np.asarray(s2, dtype=float)
    if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)):
        raise ValueError("non-finite input point")
    d = np.sqrt(((a - b) ** 2).sum(axis=-1))
    return matern_cov_from_distance(d, params)


def matern_cov_matrix(coords, params: MaternParams) -> np.ndarray:
    """Dense n x n covariance of a point configuration.

    Pairwise distances are deduplicated before the Bessel evaluation; grid
    layouts repeat the same distance thousands of times, and identical input
    bits give identical output bits, so this matches the naive loop exactly.
    """
    coords = np.ascontiguousarray(coords, dtype=float)
    n = coords.shape[0]
    if n == 1:
        return np.array([[params.sigma2]])
    uq, inv = np.unique(pdist(coords), return_inverse=True)
    C = squareform(np.asarray(matern_cov_from_distance(uq, params))[inv])
    np.fill_diagonal(C, params.sigma2)
    return C


def sample_gp(coords, params: MaternParams, rng, *, jitters=_JITTERS):
    """One draw of a mean-zero Matern field at ``coords``.

    ``rng`` is a numpy Generator or an integer seed.  The standard-normal
    vector is drawn before factorization, so the consumed random stream does
    not depend on how many jitter levels the Cholesky needs.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "gp")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ValueError("coords must be a non-empty (n, 2) array")
    C = matern_cov_matrix(coords, params)
    z = rng.standard_normal(C.shape[0])
    eye = np.eye(C.shape[0])
    for eps in jitters:
        try:
            L = np.linalg.cholesky(C + eps * eye)
        except np.linalg.LinAlgError:
            continue
        return L @ z
    raise np.linalg.LinAlgError(
        f"covariance factorization failed at jitter {jitters[-1]:g}"
    )


# ---------------------------------------------------------------------------
# image supports


@dataclass(frozen=True)
class ShapeSpec:
    """How to produce one subject's voxel support.

    ``ellipse`` draws a randomly perturbed ellipse and fills it with a square
    grid whose pitch targets ``n_target`` voxels (within ``tolerance``); the
    concentric inner ellipse holding ``inner_fraction`` of the area is zone 1
    and the remainder zone 0.  ``file`` reads x,y,zone rows from ``path``.
    """

    n_target: int = 1500
    inner_fraction: float = 0.6
    generator: str = "ellipse"
    path: str | None = None
    tolerance: float = 0.10

    def __post_init__(self):
        if self.generator not in ("ellipse", "file"):
            raise ValueError(f"unknown shape generator {self.generator!r}")
        if self.generator == "file" and not self.path:
            raise ValueError("file shape generator requires a path")
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        if not 0.0 <= self.inner_fraction <= 1.0:
            raise ValueError("inner_fraction must lie in [0, 1]")
        if not 0.0 < self.tolerance < 1.0:
            raise ValueError("tolerance must lie in (0, 1)")


def generate_shape(spec: ShapeSpec, rng):
    """Standardized coordinates and zone labels for one subject."""
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "shape")
    if spec.generator == "file":
        return _load_shape_file(spec.path)

    a = rng.uniform(0.55, 0.85)
    b = rng.uniform(0.45, 0.75)
    amp = rng.uniform(0.0, 0.12, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    anchor = rng.uniform(-0.5, 0.5, size=2)

    pitch = math.sqrt(math.pi * a * b / spec.n_target)
    for _ in range(12):
        nx = int(np.ceil(2.0 * (a + pitch) / pitch))
        ny = int(np.ceil(2.0 * (b + pitch) / pitch))
        xs = (np.arange(nx) - (nx - 1) / 2.0 + anchor[0]) * pitch
        ys = (np.arange(ny) - (ny - 1) / 2.0 + anchor[1]) * pitch
        pts = np.column_stack([np.repeat(xs, ny), np.tile(ys, nx)])
        ex = pts[:, 0] / a
        ey = pts[:, 1] / b
        q = ex * ex + ey * ey
        theta = np.arctan2(ey, ex)
        rho2 = (1.0
                + amp[0] * np.sin(2.0 * theta + phase[0])
                + amp[1] * np.sin(3.0 * theta + phase[1])) ** 2
        inside = q < rho2
        n = int(inside.sum())
        if abs(n - spec.n_target) <= spec.tolerance * spec.n_target and n >= 1:
            break
        # feedback toward the target count; no randomness inside the loop
        pitch *= math.sqrt(max(n, 1) / spec.n_target)
    else:
        raise ValueError(
            f"could not hit n_target={spec.n_target} within "
            f"{spec.tolerance:.0%} after 12 pitch adjustments"
        )
    zones = (q[inside] < spec.inner_fraction * rho2[inside]).astype(np.int64)
    return standardize_coordinates(pts[inside]), zones


def _load_shape_file(path):
    raw, zones = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "zone"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: shape file needs columns x, y, zone")
        for i, row in enumerate(reader):
            try:
                raw.append((float(row["x"]), float(row["y"])))
                zones.append(int(row["zone"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad shape row {i + 2}: {exc}") from exc
    if not raw:
        raise ValueError(f"{path}: shape file has no rows")
    zones = np.asarray(zones, dtype=np.int64)
    if np.any((zones != 0) & (zones != 1)):
        raise ValueError(f"{path}: zone labels must be 0 or 1")
    return standardize_coordinates(np.asarray(raw, dtype=float)), zones


# ---------------------------------------------------------------------------
# generative configuration


def _psd_check(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(M)
    if w.min() < -1e-8 * max(1.0, w.max()):
        raise ValueError(f"{name} is not positive semi-definite")
    return M


def _chol_psd(M, name):
    """Lower Cholesky factor, escalating a diagonal jitter for singular PSD input."""
    eye = np.eye(M.shape[0])
    for eps in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(M + eps * eye)
        except np.linalg.LinAlgError:
            continue
    raise ValueError(f"{name} admits no Cholesky factor even with jitter")


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulated dataset depends on, besides the seed path.

    ``mu``/``gamma`` are indexed [class, zone]: class axis 0..1 for binary
    labels, 0..2 for ordinal grades 1..3 (set ``cuts`` for the latter).
    ``q`` holds the baseline probits (zone 0, zone 1) of the latent score.
    Region shifts at each resolution in ``k_shift`` are N(0, Lambda) vectors
    drawn once per dataset and added to every subject's feature means.
    """

    n_subjects: int
    shape: ShapeSpec
    theta: MaternParams
    q: tuple
    mu: np.ndarray
    gamma: np.ndarray
    Lambda: np.ndarray
    k_shift: tuple = (2, 3)
    tau2: float = 0.0
    cuts: tuple | None = None
    feature_names: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        q = tuple(float(v) for v in self.q)
        if len(q) != 2 or not all(np.isfinite(v) for v in q):
            raise ValueError("q must be two finite baseline probits (zone 0, zone 1)")
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 3 or mu.shape[1] != 2:
            raise ValueError(f"mu must have shape (classes, 2, d), got {mu.shape}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu has non-finite entries")
        C, _, d = mu.shape
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.shape != (C, 2, d, d):
            raise ValueError(
                f"gamma must have shape {(C, 2, d, d)} to match mu, got {gamma.shape}"
            )
        for z in range(C):
            for r in (0, 1):
                _psd_check(gamma[z, r], f"gamma[{z},{r}]")
        Lam = _psd_check(self.Lambda, "Lambda")
        if Lam.shape != (d, d):
            raise ValueError(f"Lambda must be {d}x{d}, got {Lam.shape}")
        ks = tuple(int(k) for k in self.k_shift)
        if any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ValueError("k_shift must be strictly increasing resolutions >= 1")
        if not (np.isfinite(self.tau2) and self.tau2 >= 0):
            raise ValueError("tau2 must be finite and >= 0")
        if self.cuts is not None:
            p1, p2 = (float(p) for p in self.cuts)
            if not 0.0 < p1 < p2 < 1.0:
                raise ValueError("cuts must satisfy 0 < p1 < p2 < 1")
            object.__setattr__(self, "cuts", (p1, p2))
        names = self.feature_names
        names = (tuple(f"f{j + 1}" for j in range(d)) if names is None
                 else tuple(str(f) for f in names))
        if len(names) != d:
            raise ValueError(f"feature_names has {len(names)} entries for d={d}")
        for arr in (mu, gamma, Lam):
            arr.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "Lambda", Lam)
        object.__setattr__(self, "k_shift", ks)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[2]


def draw_region_shifts(config: SimConfig, seed: int) -> dict:
    """One N(0, Lambda) shift vector per cell per resolution; shared dataset-wide."""
    rng = make_rng(seed, "shifts")
    L = _chol_psd(config.Lambda, "Lambda")
    return {k: rng.standard_normal((k * k, config.d)) @ L.T
            for k in config.k_shift}


def _feature_chols(config: SimConfig):
    return [[_chol_psd(config.gamma[z, r], f"gamma[{z},{r}]") for r in (0, 1)]
            for z in range(config.n_classes)]


def _draw_features(config, chols, shifts, coords, zones, class_idx, delta, rng):
    mean = config.mu[class_idx, zones] + delta
    for k, E in shifts.items():
        mean = mean + E[region_index(coords, k) - 1]
    eps = rng.standard_normal((len(zones), config.d))
    y = np.empty_like(eps)
    for z in range(config.n_classes):
        for r in (0, 1):
            m = (class_idx == z) & (zones == r)
            if m.any():
                y[m] = mean[m] + eps[m] @ chols[z][r].T
    return y


def simulate_binary_dataset(config: SimConfig, shape=None, seed=None) -> Dataset:
    """Latent-probit cancer labels: c = 1{N(q_zone + w, 1) > 0}."""
    if config.n_classes != 2:
        raise ValueError(
            f"binary simulation needs mu/gamma for 2 classes, got {config.n_classes}"
        )
    shape = config.shape if shape is None else shape
    seed = config.seed if seed is None else int(seed)
    shifts = draw_region_shifts(config, seed)
    chols = _feature_chols(config)
    q = np.asarray(config.q)
    subjects = []
    for i in range(config.n_subjects):
        rng = make_rng(seed, "subject", i)
        coords, zones = generate_shape(shape, rng)
        w = sample_gp(coords, config.theta, rng)
        cstar = q[zones] + w + rng.standard_normal(len(zones))
        c = (cstar > 0).astype(np.int64)
        delta = math.sqrt(config.tau2) * rng.standard_normal(config.d)
        y = _draw_features(config, chols, shifts, coords, zones, c, delta, rng)
        subjects.append(SubjectImage(f"sim{i + 1:03d}", coords, zones, y, c=c))
    return Dataset(subjects, config.feature_names, Z=2)


def ordinal_cuts(pool, p1: float, p2: float):
    """Order-statistic cuts of a realized latent pool.

    Cutting at sorted[floor(p1 n)] and sorted[floor(p2 n)] makes the grade
    counts exactly (floor(p1 n), floor(p2 n) - floor(p1 n), n - floor(p2 n))
    whenever the pooled scores are distinct.
    """
    srt = np.sort(np.asarray(pool, dtype=float))
    n = len(srt)
    return float(srt[int(math.floor(p1 * n))]), float(srt[int(math.floor(p2 * n))])


def simulate_ordinal_dataset(config: SimConfig, shape=None, seed=None) -> Dataset:
    """Ordinal grades from percentile cuts of the pooled latent score."""
    if config.cuts is None:
        raise ValueError("ordinal simulation requires percentile cuts")
    if config.n_classes != 3:
        raise ValueError(
            f"ordinal simulation needs mu/gamma for 3 grades, got {config.n_classes}"
        )
    shape = config.shape if shape is None else shape
    seed = config.seed if seed is None else int(seed)
    shifts = draw_region_shifts(config, seed)
    chols = _feature_chols(config)
    q = np.asarray(config.q)

    drawn = []  # (rng resumed later, coords, zones, latent)
    for i in range(config.n_subjects):
        rng = make_rng(seed, "subject", i)
        coords, zones = generate_shape(shape, rng)
        w = sample_gp(coords, config.theta, rng)
        gstar = q[zones] + w + rng.standard_normal(len(zones))
        drawn.append((rng, coords, zones, gstar))

    a1, a2 = ordinal_cuts(np.concatenate([g for _, _, _, g in drawn]), *config.cuts)

    subjects = []
    for i, (rng, coords, zones, gstar) in enumerate(drawn):
        G = 1 + (gstar >= a1).astype(np.int64) + (gstar >= a2).astype(np.int64)
        c = (G >= 2).astype(np.int64)
        delta = math.sqrt(config.tau2) * rng.standard_normal(config.d)
        y = _draw_features(config, chols, shifts, coords, zones, G - 1, delta, rng)
        subjects.append(SubjectImage(f"sim{i + 1:03d}", coords, zones, y, c=c, G=G))
    return Dataset(subjects, config.feature_names, Z=3)


# ---------------------------------------------------------------------------
# named presets

_THETA = {
    "moderate": MaternParams(sigma2=4.0, phi=0.2, nu=0.8),
    "strong": MaternParams(sigma2=10.0, phi=0.5, nu=1.5),
}
_LAMBDA_SD = {"moderate": 0.25, "strong": 0.6}

_FEATURES = ("adc", "augc90", "kep", "ktrans")
_GAP = np.array([-0.9, 0.7, 0.6, 0.8])
_ZONE_OFF = np.array([0.3, -0.2, 0.1, 0.0])
_PREVALENCE = (0.20, 0.35)  # target cancer fraction in zone 0 / zone 1

_ORDINAL_GAP = np.array([-1.4, 1.1, 0.9, 1.2])
_ORDINAL_KICK = np.array([0.5, 0.5, -0.4, 0.0])
_ORDINAL_Q = (0.0, 0.6)


def _cs_cov(d, rho=0.3, scale=1.0):
    M = np.full((d, d), rho * scale)
    np.fill_diagonal(M, scale)
    return M


def _binary_preset(hetero, spatial):
    theta = _THETA[spatial]
    lam = _LAMBDA_SD[hetero]
    d = len(_GAP)
    mu = np.stack([
        np.stack([np.zeros(d), _ZONE_OFF]),
        np.stack([_GAP, _GAP + _ZONE_OFF]),
    ])
    gamma = np.stack([
        np.stack([_cs_cov(d), _cs_cov(d)]),
        np.stack([_cs_cov(d, scale=1.2), _cs_cov(d, scale=1.2)]),
    ])
    # the marginal latent score is N(q, 1 + sigma2), so scale the probit of
    # the target prevalence accordingly
    s = math.sqrt(1.0 + theta.sigma2)
    q = tuple(float(ndtri(p) * s) for p in _PREVALENCE)
    return SimConfig(
        n_subjects=34,
        shape=ShapeSpec(n_target=1500, inner_fraction=0.6),
        theta=theta,
        q=q,
        mu=mu,
        gamma=gamma,
        Lambda=lam * lam * np.eye(d),
        k_shift=(2, 3),
        tau2=0.01,
        feature_names=_FEATURES,
    )


def _ordinal_preset(hetero, spatial):
    theta = _THETA[spatial]
    lam = _LAMBDA_SD[hetero]
    d = len(_ORDINAL_GAP)
    base = [np.zeros(d),
            0.5 * _ORDINAL_GAP + _ORDINAL_KICK,
            _ORDINAL_GAP]
    mu = np.stack([np.stack([b, b + _ZONE_OFF]) for b in base])
    gamma = np.stack([
        np.stack([_cs_cov(d), _cs_cov(d)]),
        np.stack([_cs_cov(d), _cs_cov(d)]),
        np.stack([_cs_cov(d, scale=1.2), _cs_cov(d, scale=1.2)]),
    ])
    return SimConfig(
        n_subjects=40,
        shape=ShapeSpec(n_target=1500, inner_fraction=0.6),
        theta=theta,
        q=_ORDINAL_Q,
        mu=mu,
        gamma=gamma,
        Lambda=lam * lam * np.eye(d),
        k_shift=(2, 3),
        tau2=0.01,
        cuts=(0.5, 0.7),
        feature_names=_FEATURES,
    )


def preset_names() -> tuple:
    names = []
    for prefix in ("", "ordinal-"):
        for h in ("moderate", "strong"):
            for s in ("moderate", "strong"):
                names.append(f"{prefix}{h}-hetero-{s}-spatial")
    return tuple(names)


def preset(name: str, **overrides) -> SimConfig:
    """Named parameter sets; keyword overrides replace top-level fields."""
    parts = name.split("-")
    ordinal = parts[0] == "ordinal"
    if ordinal:
        parts = parts[1:]
    if (len(parts) != 4 or parts[1] != "hetero" or parts[3] != "spatial"
            or parts[0] not in _LAMBDA_SD or parts[2] not in _THETA):
        raise ValueError(
            f"unknown preset {name!r}; choose from {', '.join(preset_names())}"
        )
    cfg = (_ordinal_preset if ordinal else _binary_preset)(parts[0], parts[2])
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# config (de)serialization


def sim_config_to_dict(config: SimConfig) -> dict:
    return {
        "n_subjects": config.n_subjects,
        "shape": {
            "n_target": config.shape.n_target,
            "inner_fraction": config.shape.inner_fraction,
            "generator": config.shape.generator,
            "path": config.shape.path,
            "tolerance": config.shape.tolerance,
        },
        "theta": {"sigma2": config.theta.sigma2, "phi": config.theta.phi,
                  "nu": config.theta.nu},
        "q": list(config.q),
        "mu": config.mu.tolist(),
        "gamma": config.gamma.tolist(),
        "Lambda": config.Lambda.tolist(),
        "k_shift": list(config.k_shift),
        "tau2": config.tau2,
        "cuts": None if config.cuts is None else list(config.cuts),
        "feature_names": list(config.feature_names),
        "seed": config.seed,
    }


def sim_config_from_dict(payload: dict) -> SimConfig:
    """Build a SimConfig from a parsed config file.

    A ``preset`` key selects a named base; any other keys override its
    fields.  Without ``preset`` the payload must spell out every field.
    """
    payload = dict(payload)
    name = payload.pop("preset", None)
    if name is not None:
        base = sim_config_to_dict(preset(name))
        base.update(payload)
        payload = base
    try:
        shape_d = payload["shape"]
        theta_d = payload["theta"]
        shape = (shape_d if isinstance(shape_d, ShapeSpec) else
                 ShapeSpec(**{k: v for k, v in shape_d.items() if v is not None}))
        if isinstance(theta_d, MaternParams):
            theta = theta_d
        elif isinstance(theta_d, (list, tuple)):
            theta = MaternParams(*theta_d)
        else:
            theta = MaternParams(**theta_d)
        cuts = payload.get("cuts")
        return SimConfig(
            n_subjects=int(payload["n_subjects"]),
            shape=shape,
            theta=theta,
            q=tuple(payload["q"]),
            mu=np.asarray(payload["mu"], dtype=float),
            gamma=np.asarray(payload["gamma"], dtype=float),
            Lambda=np.asarray(payload["Lambda"], dtype=float),
            k_shift=tuple(payload.get("k_shift", (2, 3))),
            tau2=float(payload.get("tau2", 0.0)),
            cuts=None if cuts is None else tuple(cuts),
            feature_names=payload.get("feature_names"),
            seed=int(payload.get("seed", 0)),
        )
    except KeyError as exc:
        raise ValueError(f"simulation config is missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ValueError(f"bad simulation config: {exc}") from exc
