"""Pose-error metrics in millimetres: MPJPE, Procrustes-aligned MPJPE, PCK and AUC."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .numeric import DimensionError

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)  # 31 points, 0..150 mm


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise DimensionError(f"poses must be (..., J, 3), got {pred.shape}")
    return pred, gt


def root_center(P: np.ndarray, root: int = 0) -> np.ndarray:
    return P - P[..., root:root + 1, :]


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    """Per-joint Euclidean error after aligning root joints, shape ``(..., J)``."""
    pred, gt = _check(pred, gt)
    return np.linalg.norm(root_center(pred, root) - root_center(gt, root), axis=-1)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(joint_errors(pred, gt, root).mean())


def procrustes_align(pred, gt, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Align each ``(J, 3)`` frame of ``pred`` onto ``gt`` by a similarity transform.

    Returns ``(aligned, ok)`` where ``ok`` flags frames whose alignment is
    well-defined (neither pose collapses to a single point). Degenerate
    frames are returned unaligned.
    """
    pred, gt = _check(pred, gt)
    shape = pred.shape
    X = pred.reshape(-1, *shape[-2:])
    Y = gt.reshape(-1, *shape[-2:])
    mx = X.mean(axis=1, keepdims=True)
    my = Y.mean(axis=1, keepdims=True)
    X0, Y0 = X - mx, Y - my
    nx = np.sqrt((X0 ** 2).sum(axis=(1, 2)))
    ny = np.sqrt((Y0 ** 2).sum(axis=(1, 2)))
    ok = (nx > 1e-12) & (ny > 1e-12)
    aligned = X.copy()
    if ok.any():
        Xn = X0[ok] / nx[ok, None, None]
        Yn = Y0[ok] / ny[ok, None, None]
        U, s, Vt = np.linalg.svd(np.swapaxes(Xn, 1, 2) @ Yn)
        V = np.swapaxes(Vt, 1, 2)
        # reflection correction: flip the last singular direction when det < 0
        sign = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
        sign[sign == 0] = 1.0
        V[:, :, -1] *= sign[:, None]
        s[:, -1] *= sign
        R = V @ np.swapaxes(U, 1, 2)
        if scale:
            a = s.sum(axis=1) * ny[ok] / nx[ok]
        else:
            a = np.ones(int(ok.sum()))
        aligned[ok] = a[:, None, None] * (X0[ok] @ np.swapaxes(R, 1, 2)) + my[ok]
    return aligned.reshape(shape), ok.reshape(shape[:-2])


def p_mpjpe(pred, gt, strict_rigid: bool = False) -> float:
    """MPJPE after per-frame similarity Procrustes (rigid only if ``strict_rigid``).

    Frames where either pose collapses to a point are skipped with a warning.
    """
    aligned, ok = procrustes_align(pred, gt, scale=not strict_rigid)
    _, gt = _check(pred, gt)
    if not ok.all():
        warnings.warn(f"p_mpjpe: {int((~ok).sum())} degenerate frame(s) excluded", RuntimeWarning, stacklevel=2)
        if not ok.any():
            raise ValueError("p_mpjpe: every frame is degenerate")
    err = np.linalg.norm(aligned - gt, axis=-1)
    return float(err[ok].mean())


def pck(pred, gt, threshold: float = PCK_THRESHOLD, root: int = 0) -> float:
    """Fraction of (frame, joint) errors strictly below ``threshold`` mm."""
    return float((joint_errors(pred, gt, root) < threshold).mean())


def auc(pred, gt, thresholds=AUC_THRESHOLDS, root: int = 0) -> float:
    err = joint_errors(pred, gt, root).ravel()
    return float(np.mean([(err < t).mean() for t in np.asarray(thresholds, dtype=np.float64)]))


@dataclass
class EvalReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    pck_150: float
    auc: float
    frames: int
    per_group: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.pck_150 <= 1.0 and 0.0 <= self.auc <= 1.0):
            raise ValueError(f"pck/auc outside [0, 1]: {self.pck_150}, {self.auc}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(pred, gt, groups=None, strict_rigid: bool = False, root: int = 0) -> EvalReport:
    """All metrics over ``(..., T, J, 3)`` arrays; ``groups`` optionally labels the leading axis."""
    pred, gt = _check(pred, gt)

    def scores(p, g):
        return dict(mpjpe_mm=mpjpe(p, g, root), p_mpjpe_mm=p_mpjpe(p, g, strict_rigid),
                    pck_150=pck(p, g, root=root), auc=auc(p, g, root=root))

    per_group = {}
    if groups is not None:
        groups = np.asarray(groups)
        for key in sorted(set(groups.tolist())):
            sel = groups == key
            per_group[str(key)] = scores(pred[sel], gt[sel])
    frames = int(np.prod(pred.shape[:-2]))
    return EvalReport(frames=frames, per_group=per_group, **scores(pred, gt))
