"""Synthetic registration pairs, corruption protocols and point file I/O.

Each sample draws from its own RNG stream seeded by ``(seed, split, index)``,
so any sample can be regenerated alone and generation order does not matter.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .assignment import HardCorrespondence
from .geometry import RigidTransform, apply_transform, nearest_neighbors, sample_random_transform

FAMILIES = ("sphere", "box", "cylinder", "torus", "cone", "composite")
PROTOCOLS = ("clean", "noise", "partial")
SPLITS = ("train", "val", "test")


class XYZFormatError(ValueError):
    pass


@dataclass
class RegistrationSample:
    source: np.ndarray
    target: np.ndarray
    gt_transform: RigidTransform
    gt_corr: HardCorrespondence
    meta: dict = field(default_factory=dict)

    def gt_matrix(self):
        return build_gt_matrix(self)


@dataclass
class DatasetConfig:
    families: tuple = FAMILIES
    n_points: int = 128
    protocol: str = "clean"
    noise_std: float = 0.01
    noise_clip: float = 0.05
    keep_ratio: float = 0.7
    rot_range: float = 45.0
    trans_range: float = 0.5
    gate: float = 0.1
    seed: int = 0
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100

    def __post_init__(self):
        if isinstance(self.families, str):
            self.families = tuple(f.strip() for f in self.families.split(",") if f.strip())
        self.families = tuple(self.families)
        bad = [f for f in self.families if f not in FAMILIES]
        if bad or not self.families:
            raise ValueError(f"unknown shape family {bad}; expected from {FAMILIES}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if self.n_points < 16:
            raise ValueError("n_points must be at least 16")

    def split_size(self, split):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# procedural shapes


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sphere(rng, n):
    # antipodal pairs (plus one zero-sum triple for odd n) keep the centroid at the centre
    pts = []
    if n % 2:
        s = math.sqrt(3.0) / 2.0
        tri = np.array([[1.0, 0.0, 0.0], [-0.5, s, 0.0], [-0.5, -s, 0.0]])
        pts.append(tri @ _random_rotation(rng).T)
        n -= 3
    half = _unit_vectors(rng, n // 2)
    pts.extend([half, -half])
    return np.concatenate(pts)


def _box(rng, n, half=None):
    half = rng.uniform(0.3, 1.0, size=3) if half is None else np.asarray(half)
    # faces normal to axis a have area 4 * h_b * h_c
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    probs = np.repeat(areas, 2) / (2 * areas.sum())
    face = rng.choice(6, size=n, p=probs)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(a), r * np.sin(a)


def _cylinder(rng, n):
    radius, h = rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)
    lateral, cap = 2 * np.pi * radius * 2 * h, np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    pts = np.empty((n, 3))
    a = rng.uniform(0, 2 * np.pi, size=n)
    pts[:, 0], pts[:, 1] = radius * np.cos(a), radius * np.sin(a)
    pts[:, 2] = rng.uniform(-h, h, size=n)
    caps = part > 0
    x, y = _disk(rng, int(caps.sum()), radius)
    pts[caps, 0], pts[caps, 1] = x, y
    pts[caps, 2] = np.where(part[caps] == 1, h, -h)
    return pts


def _cone(rng, n):
    radius, h = rng.uniform(0.3, 1.0), rng.uniform(0.5, 1.5)
    lateral, base = np.pi * radius * math.hypot(radius, h), np.pi * radius ** 2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    pts = np.empty((n, 3))
    s = np.sqrt(rng.uniform(size=n))  # area-uniform along the slant
    a = rng.uniform(0, 2 * np.pi, size=n)
    pts[:, 0], pts[:, 1] = s * radius * np.cos(a), s * radius * np.sin(a)
    pts[:, 2] = h * (1.0 - s)
    x, y = _disk(rng, int(on_base.sum()), radius)
    pts[on_base, 0], pts[on_base, 1], pts[on_base, 2] = x, y, 0.0
    return pts


def _torus(rng, n):
    R, r = rng.uniform(0.6, 1.0), rng.uniform(0.15, 0.4)
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        # area element grows with distance from the axis
        keep = rng.uniform(size=2 * n) < (R + r * np.cos(v)) / (R + r)
        u, v = u[keep], v[keep]
        ring = R + r * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], 1)])
    return out[:n]


def _composite(rng, n):
    n_parts = int(rng.integers(2, 5))
    counts = rng.multinomial(n - 4 * n_parts, np.full(n_parts, 1.0 / n_parts)) + 4
    parts = []
    for c in counts:
        kind = rng.integers(4)
        if kind == 0:
            p = _box(rng, c)
        elif kind == 1:
            p = _cylinder(rng, c)
        elif kind == 2:
            p = _cone(rng, c)
        else:
            p = _unit_vectors(rng, c) * rng.uniform(0.2, 0.8, size=3)
        p = p * rng.uniform(0.4, 0.8)
        parts.append(p @ _random_rotation(rng).T + rng.uniform(-0.6, 0.6, size=3))
    return np.concatenate(parts)


_GENERATORS = {
    "sphere": _sphere,
    "box": _box,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
    "composite": _composite,
}


def procedural_shape(family, rng, n):
    """``n`` surface points of a randomly parameterised shape, rescaled to the unit sphere."""
    if family not in _GENERATORS:
        raise ValueError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    if n < 16:
        raise ValueError("procedural shapes need n >= 16")
    return rescale_unit_sphere(_GENERATORS[family](rng, n))


def rescale_unit_sphere(X):
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty cloud")
    Y = X - X.mean(axis=0)
    scale = np.linalg.norm(Y, axis=1).max()
    if scale == 0:
        raise ValueError("all points coincide; cannot rescale")
    return Y / scale


# ---------------------------------------------------------------------------
# protocols


def make_clean_pair(X, rng, rot_range=45.0, trans_range=0.5, meta=None):
    T = sample_random_transform(rng, rot_range, trans_range)
    perm = rng.permutation(len(X))
    Y = apply_transform(T, X)[perm]
    pairs = np.stack([perm, np.arange(len(X))], axis=1)
    corr = HardCorrespondence.from_pairs(pairs, (len(X), len(X)))
    return RegistrationSample(np.array(X, dtype=np.float64), Y, T, corr, dict(meta or {}, protocol="clean"))


def clipped_gaussian(rng, shape, std, clip):
    return np.clip(rng.normal(0.0, std, size=shape), -clip, clip)


def rebuild_correspondences(Xp, Y, gate=0.1, rounds=2):
    """Mutual-nearest-neighbour pairs closer than ``gate``, in two passes.

    Pairs found in one pass are removed before the next, which catches points
    whose partner is only their second-nearest neighbour.
    """
    Xp, Y = np.asarray(Xp, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    rem_x, rem_y = np.arange(len(Xp)), np.arange(len(Y))
    found = []
    for _ in range(rounds):
        if len(rem_x) == 0 or len(rem_y) == 0:
            break
        dx, jx = nearest_neighbors(Xp[rem_x], Y[rem_y])
        _, iy = nearest_neighbors(Y[rem_y], Xp[rem_x])
        local = np.arange(len(rem_x))
        mutual = (iy[jx] == local) & (np.sqrt(dx) < gate)
        if not mutual.any():
            continue
        found.append(np.stack([rem_x[mutual], rem_y[jx[mutual]]], axis=1))
        rem_x = rem_x[~mutual]
        rem_y = np.setdiff1d(rem_y, rem_y[jx[mutual]])
    pairs = np.concatenate(found) if found else np.zeros((0, 2), dtype=np.int64)
    return HardCorrespondence.from_pairs(pairs, (len(Xp), len(Y)))


def add_gaussian_noise(sample, rng, std=0.01, clip=0.05, gate=0.1):
    """Clipped i.i.d. noise on every coordinate of both clouds; correspondences rebuilt."""
    if std == 0:
        return sample
    X = sample.source + clipped_gaussian(rng, sample.source.shape, std, clip)
    Y = sample.target + clipped_gaussian(rng, sample.target.shape, std, clip)
    corr = rebuild_correspondences(apply_transform(sample.gt_transform, X), Y, gate)
    return RegistrationSample(X, Y, sample.gt_transform, corr, dict(sample.meta, protocol="noise"))


def crop_count(n, keep):
    # guard against 0.7 * 10 = 7.000000000000001 rounding up
    return min(n, max(1, math.ceil(keep * n - 1e-9)))


def partial_crop(X, rng, keep=0.7, normal=None):
    """Keep the ``ceil(keep * n)`` points farthest along a random direction.

    Equivalent to sliding a plane through the origin along its normal until
    exactly that many points remain on the positive side.  Returns the kept
    cloud (original order) and the kept indices.
    """
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    if normal is None:
        normal = _unit_vectors(rng, 1)[0]
    count = crop_count(len(X), keep)
    order = np.argsort(-(X @ np.asarray(normal)), kind="stable")
    kept = np.sort(order[:count])
    return X[kept], kept


def make_partial_pair(X, rng, keep=0.7, rot_range=45.0, trans_range=0.5, meta=None):
    full = make_clean_pair(X, rng, rot_range, trans_range, meta)
    src, ks = partial_crop(full.source, rng, keep)
    tgt, kt = partial_crop(full.target, rng, keep)
    new_s = np.full(len(full.source), -1)
    new_s[ks] = np.arange(len(ks))
    new_t = np.full(len(full.target), -1)
    new_t[kt] = np.arange(len(kt))
    p = full.gt_corr.pairs
    mapped = np.stack([new_s[p[:, 0]], new_t[p[:, 1]]], axis=1)
    mapped = mapped[(mapped >= 0).all(axis=1)]
    corr = HardCorrespondence.from_pairs(mapped, (len(src), len(tgt)))
    return RegistrationSample(src, tgt, full.gt_transform, corr, dict(full.meta, protocol="partial"))


def build_gt_matrix(sample):
    return sample.gt_corr.as_matrix()


def sample_rng(seed, split, index):
    return np.random.default_rng([int(seed), SPLITS.index(split), int(index)])


def generate_sample(cfg, split, index):
    rng = sample_rng(cfg.seed, split, index)
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    X = procedural_shape(family, rng, cfg.n_points)
    meta = {"id": f"{split}_{index:05d}", "family": family, "split": split, "index": index}
    if cfg.protocol == "partial":
        return make_partial_pair(X, rng, cfg.keep_ratio, cfg.rot_range, cfg.trans_range, meta)
    sample = make_clean_pair(X, rng, cfg.rot_range, cfg.trans_range, meta)
    if cfg.protocol == "noise":
        sample = add_gaussian_noise(sample, rng, cfg.noise_std, cfg.noise_clip, cfg.gate)
    return sample


def generate_split(cfg, split, count=None):
    count = cfg.split_size(split) if count is None else count
    return [generate_sample(cfg, split, i) for i in range(count)]


# ---------------------------------------------------------------------------
# files


def save_xyz(path, X):
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w") as fh:
        for p in X:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def load_xyz(path):
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                pts.append([float(v) for v in parts])
            except ValueError:
                raise XYZFormatError(f"{path}: line {lineno}: expected three reals, got {s!r}") from None
    X = np.array(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(X)):
        raise XYZFormatError(f"{path}: non-finite coordinates")
    return X


def save_transform(path, T):
    with open(path, "w") as fh:
        for row in T.as_matrix()[:3]:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_transform(path):
    """Read a 3x4 ``[R | t]`` text matrix (an optional fourth row is ignored)."""
    rows = [line.split() for line in open(path) if line.strip() and not line.startswith("#")]
    try:
        m = np.array([[float(v) for v in r] for r in rows[:3]])
    except ValueError:
        raise XYZFormatError(f"{path}: malformed transform") from None
    if m.shape != (3, 4):
        raise XYZFormatError(f"{path}: expected a 3x4 [R|t] matrix, got shape {m.shape}")
    return RigidTransform(m[:, :3], m[:, 3])


MANIFEST = "manifest.txt"
_MANIFEST_HEADER = "# sample_id split protocol seed family n_source n_target"


def _write_gt(path, sample):
    with open(path, "w") as fh:
        for row in sample.gt_transform.as_matrix()[:3]:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        fh.write(f"# pairs {len(sample.gt_corr)}\n")
        for i, j in sample.gt_corr.pairs:
            fh.write(f"{i} {j}\n")


def _read_gt(path, shape):
    lines = [ln.split() for ln in open(path) if ln.strip() and not ln.startswith("#")]
    m = np.array([[float(v) for v in r] for r in lines[:3]])
    pairs = np.array([[int(v) for v in r] for r in lines[3:]], dtype=np.int64).reshape(-1, 2)
    return RigidTransform(m[:, :3], m[:, 3]), HardCorrespondence.from_pairs(pairs, shape)


def write_dataset(out_dir, cfg, splits=SPLITS):
    """Write every split as xyz clouds + gt files, plus one manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_MANIFEST_HEADER]
    for split in splits:
        for i in range(cfg.split_size(split)):
            s = generate_sample(cfg, split, i)
            sid = s.meta["id"]
            save_xyz(out / f"{sid}_src.xyz", s.source)
            save_xyz(out / f"{sid}_tgt.xyz", s.target)
            _write_gt(out / f"{sid}.gt", s)
            rows.append(f"{sid} {split} {cfg.protocol} {cfg.seed} {s.meta['family']} "
                        f"{len(s.source)} {len(s.target)}")
    path = out / MANIFEST
    path.write_text("\n".join(rows) + "\n")
    return path


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sid, split, protocol, seed, family, ns, nt = line.split()
        rows.append(dict(id=sid, split=split, protocol=protocol, seed=int(seed), family=family,
                         n_source=int(ns), n_target=int(nt)))
    return rows


def load_dataset(data_dir, split):
    d = Path(data_dir)
    samples = []
    for row in read_manifest(d):
        if row["split"] != split:
            continue
        X = load_xyz(d / f"{row['id']}_src.xyz")
        Y = load_xyz(d / f"{row['id']}_tgt.xyz")
        T, corr = _read_gt(d / f"{row['id']}.gt", (len(X), len(Y)))
        meta = dict(id=row["id"], split=split, protocol=row["protocol"], family=row["family"])
        samples.append(RegistrationSample(X, Y, T, corr, meta))
    return samples
