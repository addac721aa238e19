"""Registration drivers (learned matcher and ICP) and dataset-level evaluation."""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import HardCorrespondence, SoftCorrespondence, hard_from_soft
from .autodiff import Tensor
from .geometry import (
    DegenerateCorrespondenceError,
    RigidTransform,
    apply_transform,
    ccd,
    kabsch_svd,
    mae_rotation,
    mae_translation,
    mie_rotation,
    mie_translation,
    nearest_neighbors,
)

METHODS = ("rgm", "rgm_var1", "rgm_var2", "icp", "oracle")
_VARIANT_OF = {"rgm": "full", "rgm_var1": "ais_variant", "rgm_var2": "fullconnect_edges"}

CSV_HEADER = ["sample_id", "mie_r_deg", "mie_t", "mae_r_deg", "mae_t", "ccd", "pass"]


@dataclass
class RegistrationResult:
    transform: RigidTransform
    correspondences: HardCorrespondence
    steps: list = field(default_factory=list)
    degenerate: bool = False
    converged: bool = True


class FixedCorrespondenceModel:
    """Stand-in matcher that always returns the same soft matrix."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def correspondence(self, X, Y, variant=None):
        n, m = self.matrix.shape
        return SoftCorrespondence(Tensor(self.matrix), np.zeros(m), np.zeros(n))


def register_rgm(X, Y, model, iters=2, variant=None):
    """Match, solve the hard assignment, align by SVD, and repeat on the moved source.

    Stops early (``degenerate=True``) when an iteration yields fewer than 3
    usable pairs; the transform accumulated so far is returned.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    current = X
    total = RigidTransform.identity()
    result = RegistrationResult(total, HardCorrespondence.empty((len(X), len(Y))))
    for _ in range(iters):
        hard = hard_from_soft(model.correspondence(current, Y, variant=variant))
        try:
            step = kabsch_svd(current, Y, hard.pairs)
        except DegenerateCorrespondenceError:
            result.degenerate = True
            break
        total = step.compose(total)
        current = apply_transform(step, current)
        result.steps.append(step)
        result.correspondences = hard
    result.transform = total
    return result


def register_icp(X, Y, T0=None, max_iters=100, tol=1e-6):
    """Point-to-point ICP from ``T0`` (identity by default).

    Stops once the mean closest-point distance changes by less than ``tol``.
    """
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    total = T0 or RigidTransform.identity()
    current = apply_transform(total, X)
    result = RegistrationResult(total, HardCorrespondence.empty((len(X), len(Y))), converged=False)
    prev = math.inf
    for _ in range(max_iters):
        d2, j = nearest_neighbors(current, Y)
        err = float(np.sqrt(d2).mean())
        if abs(prev - err) < tol:
            result.converged = True
            break
        prev = err
        pairs = np.stack([np.arange(len(current)), j], axis=1)
        try:
            step = kabsch_svd(current, Y, pairs)
        except DegenerateCorrespondenceError:
            result.degenerate = True
            break
        total = step.compose(total)
        current = apply_transform(step, current)
        result.steps.append(step)
        result.correspondences = HardCorrespondence.from_pairs(pairs, (len(X), len(Y)))
    result.transform = total
    return result


def correspondence_precision(pred, gt):
    if len(pred) == 0:
        return 0.0
    truth = {(int(i), int(j)) for i, j in gt.pairs}
    return sum((int(i), int(j)) in truth for i, j in pred.pairs) / len(pred)


def sample_metrics(sample, result, rot_thresh=1.0, trans_thresh=0.1):
    T, G = result.transform, sample.gt_transform
    mae_r, reliable = mae_rotation(G.R, T.R)
    mae_t = mae_translation(G.t, T.t)
    return {
        "sample_id": sample.meta.get("id", ""),
        "mie_r_deg": mie_rotation(G.R, T.R),
        "mie_t": mie_translation(G.t, T.t),
        "mae_r_deg": mae_r,
        "mae_t": mae_t,
        "ccd": ccd(apply_transform(T, sample.source), sample.target),
        "pass": int(mae_r < rot_thresh and mae_t < trans_thresh),
        "precision": correspondence_precision(result.correspondences, sample.gt_corr),
        "euler_reliable": reliable,
        "degenerate": result.degenerate,
    }


def _check_method(method, model):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in _VARIANT_OF:
        if model is None:
            raise ValueError(f"method {method} needs trained weights")
        if not model.supports(_VARIANT_OF[method]):
            raise ValueError(f"method {method} cannot run on a {model.config.variant!r} model")


def register_sample(sample, method, model=None, iters=2):
    if method == "icp":
        return register_icp(sample.source, sample.target)
    if method == "oracle":
        return RegistrationResult(sample.gt_transform, sample.gt_corr)
    return register_rgm(sample.source, sample.target, model, iters, _VARIANT_OF[method])


@dataclass
class EvalReport:
    method: str
    rows: list
    results: list

    def summary(self):
        keys = ["mie_r_deg", "mie_t", "mae_r_deg", "mae_t", "ccd", "precision"]
        out = {k: float(np.mean([r[k] for r in self.rows])) for k in keys}
        out["recall"] = float(np.mean([r["pass"] for r in self.rows]))
        return out


def evaluate(samples, method, model=None, iters=2, jobs=1):
    """Register every sample with ``method`` and collect per-sample metrics."""
    _check_method(method, model)
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation dataset is empty")

    def run(sample):
        result = register_sample(sample, method, model, iters)
        return result, sample_metrics(sample, result)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(run, samples))
    else:
        out = [run(s) for s in samples]
    return EvalReport(method, [m for _, m in out], [r for r, _ in out])


def _fmt(v):
    return repr(float(v))


def write_metrics_csv(path, report):
    summary = report.summary()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r["sample_id"]] + [_fmt(r[k]) for k in CSV_HEADER[1:-1]] + [r["pass"]])
        w.writerow(["mean"] + [_fmt(summary[k]) for k in CSV_HEADER[1:-1]] + [_fmt(summary["recall"])])


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def correspondence_grid(matrices, gap=1):
    """Tile binary matrices into one grayscale image (255 = pair, 64 = separator)."""
    matrices = [np.asarray(m) for m in matrices]
    cols = max(1, math.ceil(math.sqrt(len(matrices))))
    rows = math.ceil(len(matrices) / cols)
    ch = max(m.shape[0] for m in matrices)
    cw = max(m.shape[1] for m in matrices)
    img = np.full((rows * (ch + gap) - gap, cols * (cw + gap) - gap), 64, dtype=np.uint8)
    for k, m in enumerate(matrices):
        r, c = divmod(k, cols)
        y, x = r * (ch + gap), c * (cw + gap)
        img[y:y + ch, x:x + cw] = 0
        img[y:y + m.shape[0], x:x + m.shape[1]] = np.where(m > 0, 255, 0)
    return img


def dump_correspondences(path, report):
    write_pgm(path, correspondence_grid([r.correspondences.as_matrix() for r in report.results]))
