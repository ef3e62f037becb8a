"""Phone-model classification from capability vectors, with hardware bias.

Real capability information elements are not public, so the shipped
database uses synthetic 256-bit vectors with a documented block layout:
each modem family sets one contiguous block of bits, and every model
additionally flips one private bit in the tail region. Within a family
any two models are therefore Hamming distance 2 apart; across families
at least 16; the Intel family block is four times wider so those phones
sit far from everything else, which is how the real capability data
behaves for iPhones.

Hardware ranging bias per model rides along in the same database: the
simulator adds it to true distances, the corrector subtracts it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .messages import CAPABILITY_BYTES, CapabilityVector

#: First bit index of the per-model flip region.
_MODEL_BIT_BASE = 192

#: Bit blocks set by each modem family base pattern.
_FAMILY_BITS = {
    "huawei": range(0, 16),
    "samsung": range(16, 32),
    "qualcomm_old": range(32, 48),
    "qualcomm_recent": range(32, 64),
    "intel": range(80, 144),
}


def family_of(model: str, modem: str) -> str:
    """Modem family for the synthetic capability construction.

    The OnePlus 7T carries a recent Qualcomm modem but its capability
    vector clusters with the older Qualcomm models; it is pinned there
    on purpose.
    """
    if model == "OnePlus 7T":
        return "qualcomm_old"
    if modem.startswith("Kirin"):
        return "huawei"
    if modem.startswith("Exynos"):
        return "samsung"
    if modem.startswith("Intel"):
        return "intel"
    if modem == "Qcom. X24 LTE":
        return "qualcomm_recent"
    return "qualcomm_old"


def synthetic_capability(model: str, modem: str,
                         model_index: int) -> CapabilityVector:
    """Deterministic capability vector for a database row."""
    bits = bytearray(CAPABILITY_BYTES)

    def flip(i: int) -> None:
        bits[i // 8] ^= 1 << (7 - i % 8)

    for i in _FAMILY_BITS[family_of(model, modem)]:
        flip(i)
    flip(_MODEL_BIT_BASE + model_index)
    return CapabilityVector(bytes(bits))


@dataclass(frozen=True)
class PhoneEntry:
    model: str
    modem: str
    capabilities: CapabilityVector
    hw_error_m: Optional[float]
    hw_error_std_m: Optional[float]


class HwErrorUnavailable(LookupError):
    """No usable hardware error: unknown model or an unmeasured table row.

    Callers should fall back to uncorrected distances.
    """


class ClassifyResult(NamedTuple):
    model: str
    distance: int
    tie: bool


class FingerprintDb:
    """Read-only model database; one capability exemplar per model."""

    def __init__(self, entries: Sequence[PhoneEntry]):
        if not entries:
            raise ValueError("empty fingerprint database")
        self.entries: dict[str, PhoneEntry] = {}
        for e in entries:
            if e.model in self.entries:
                raise ValueError(f"duplicate model {e.model!r}")
            self.entries[e.model] = e

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, model: str) -> bool:
        return model in self.entries

    @classmethod
    def load(cls, path) -> "FingerprintDb":
        with open(path, newline="") as fh:
            return cls._from_rows(csv.DictReader(fh))

    @classmethod
    def default(cls) -> "FingerprintDb":
        ref = resources.files("tatrack").joinpath("data/phones.csv")
        with ref.open(newline="") as fh:
            return cls._from_rows(csv.DictReader(fh))

    @classmethod
    def _from_rows(cls, rows) -> "FingerprintDb":
        entries = []
        for row in rows:
            hw = row["hw_error_m"].strip()
            std = row["hw_error_std_m"].strip()
            entries.append(PhoneEntry(
                model=row["model"],
                modem=row["modem"],
                capabilities=CapabilityVector.from_hex(row["capability_hex"]),
                hw_error_m=float(hw) if hw else None,
                hw_error_std_m=float(std) if std else None,
            ))
        return cls(entries)

    def check_modem_consistency(self) -> None:
        """Same-modem entries must agree on hw_error within their stds."""
        by_modem: dict[str, list[PhoneEntry]] = {}
        for e in self.entries.values():
            if e.hw_error_m is not None:
                by_modem.setdefault(e.modem, []).append(e)
        for modem, group in by_modem.items():
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    a, b = group[i], group[j]
                    gap = abs(a.hw_error_m - b.hw_error_m)
                    if gap > a.hw_error_std_m + b.hw_error_std_m:
                        raise ValueError(
                            f"modem {modem!r}: {a.model} and {b.model} "
                            f"disagree by {gap:.2f} m")


def classify(v: CapabilityVector, db: FingerprintDb) -> ClassifyResult:
    """Nearest database entry by Hamming distance.

    Ties go to the lexicographically smallest model name, with the tie
    flag set so callers can treat the label as uncertain.
    """
    best: list[str] = []
    best_d = None
    for entry in db.entries.values():
        d = v.hamming(entry.capabilities)
        if best_d is None or d < best_d:
            best, best_d = [entry.model], d
        elif d == best_d:
            best.append(entry.model)
    return ClassifyResult(min(best), best_d, len(best) > 1)


def hw_error(model: str, db: FingerprintDb) -> float:
    """Table bias for a model; raises HwErrorUnavailable to force fallback."""
    entry = db.entries.get(model)
    if entry is None:
        raise HwErrorUnavailable(f"model {model!r} not in database")
    if entry.hw_error_m is None:
        raise HwErrorUnavailable(f"model {model!r} has no measured bias")
    return entry.hw_error_m


def estimate_hw_error(estimated: Sequence[float],
                      actual: Sequence[float]) -> float:
    """Mean difference between estimated and actual distances."""
    if len(estimated) != len(actual) or not estimated:
        raise ValueError("need equal-length nonempty sequences")
    return float(np.mean(np.asarray(estimated) - np.asarray(actual)))


# ---------------------------------------------------------------------------
# PCA over capability vectors


@dataclass(frozen=True)
class PcaProjection:
    components: np.ndarray  # (2, n_bits), orthonormal rows
    scores: np.ndarray      # (n_samples, 2)
    variances: tuple[float, float]


def _orthonormalize(Z: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on two columns, backfilling if rank collapses."""
    q1 = Z[:, 0]
    n1 = float(np.linalg.norm(q1))
    if n1 < 1e-12:
        q1 = np.zeros(len(q1))
        q1[0] = 1.0
    else:
        q1 = q1 / n1
    q2 = Z[:, 1] - (q1 @ Z[:, 1]) * q1
    n2 = float(np.linalg.norm(q2))
    if n2 < 1e-12:
        # Rank-1 data: complete with the first coordinate axis that works.
        for k in range(len(q1)):
            cand = np.zeros(len(q1))
            cand[k] = 1.0
            cand -= (q1 @ cand) * q1
            n2 = float(np.linalg.norm(cand))
            if n2 > 1e-6:
                q2 = cand
                break
    q2 = q2 / n2
    return np.column_stack([q1, q2])


def _eig2(B: np.ndarray):
    """Closed-form eigendecomposition of a symmetric 2x2 matrix."""
    a, b, d = float(B[0, 0]), float(B[0, 1]), float(B[1, 1])
    half_gap = 0.5 * math.hypot(a - d, 2 * b)
    mean = 0.5 * (a + d)
    lam1, lam2 = mean + half_gap, mean - half_gap
    theta = 0.5 * math.atan2(2 * b, a - d)
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    return (lam1, lam2), rot


def project_pca(vectors: Sequence[CapabilityVector], *, tol: float = 1e-9,
                max_iter: int = 10_000) -> PcaProjection:
    """Top-2 principal components of mean-centered, +-1 encoded bits.

    Orthogonal iteration on the covariance matrix with a Rayleigh-Ritz
    rotation at the end; no library eigensolver involved. Raises on fewer
    than 3 vectors or zero-variance input.
    """
    if len(vectors) < 3:
        raise ValueError("need at least 3 vectors")
    rows = []
    for v in vectors:
        bits = np.unpackbits(np.frombuffer(v.bits, dtype=np.uint8))
        rows.append(bits.astype(float) * 2.0 - 1.0)
    X = np.array(rows)
    Xc = X - X.mean(axis=0)
    if not Xc.any():
        raise ValueError("zero variance: all capability vectors identical")
    C = (Xc.T @ Xc) / len(X)

    rng = np.random.default_rng(np.random.Philox(key=20260815))
    Q = _orthonormalize(rng.standard_normal((C.shape[0], 2)))
    prev = np.zeros(2)
    for _ in range(max_iter):
        Q = _orthonormalize(C @ Q)
        ritz = np.diag(Q.T @ C @ Q).copy()
        if np.max(np.abs(ritz - prev)) < tol * max(float(ritz[0]), 1e-30):
            break
        prev = ritz

    (lam1, lam2), rot = _eig2(Q.T @ C @ Q)
    V = Q @ rot
    # Fix sign for determinism: largest-magnitude coordinate positive.
    for k in range(2):
        lead = int(np.argmax(np.abs(V[:, k])))
        if V[lead, k] < 0:
            V[:, k] = -V[:, k]
    return PcaProjection(components=V.T.copy(),
                         scores=Xc @ V,
                         variances=(float(lam1), float(lam2)))
