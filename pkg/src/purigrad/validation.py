"""Replicate-based evaluation of a stochastic defense, decoupled from the attack.

The defended classifier is estimated as the mean of classifier logits over
``H_d`` purification replicates. Replicate ``h`` of trial ``r`` for image
``i`` uses noise from ``streams.replicate_noise(seed, tag, [i], r, H_d, ...)``,
so results are independent of evaluation order and worker count.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import streams
from .models import ConfigError

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean_logits", "majority_vote")
POLICIES = ("first_broken", "final", "loss_optimized")
CSV_COLUMNS = (
    "image_id",
    "policy",
    "H_d",
    "trial",
    "na_correct",
    "aa_correct",
    "correct_logit",
    "top_incorrect_logit",
    "p_value",
)


class HashMismatch(RuntimeError):
    pass


@dataclass
class ValidationConfig:
    H_d: int = 10
    trials: int = 3
    aggregation: str = "mean_logits"
    policy: str = "loss_optimized"
    seed: int = 0
    chunk: int = 64

    def validate(self) -> None:
        if self.H_d < 1:
            raise ConfigError("H_d must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation '{self.aggregation}'")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown state policy '{self.policy}'")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")


@dataclass
class ValidationReport:
    OA: float
    NA: float
    AA: float
    H_d: int
    policy: str
    aggregation: str
    trials: int
    na_per_trial: list
    aa_per_trial: list
    na_std: float
    aa_std: float
    alt_aggregation: str
    na_alt_per_trial: list
    aa_alt_per_trial: list
    stability: list
    rows: list = field(repr=False, default_factory=list)
    n_images: int = 0
    skipped: int = 0
    fallbacks: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


# ------------------------------------------------------------------ estimation


def _noise(defense, image_ids, trial, H_d, d, seed, tag):
    nz = streams.replicate_noise(seed, tag, image_ids, trial, H_d, defense.purifier.n_steps, (d,))
    return nz if defense.purifier.stochastic else np.zeros_like(nz)


def replicate_logits(
    x,
    defense,
    H_d: int,
    *,
    image_ids: Optional[Sequence[int]] = None,
    trial: int = 0,
    seed: int = 0,
    tag: int = streams.VALIDATE,
    chunk: int = 64,
    rng=None,
) -> np.ndarray:
    """Per-replicate logits, shape (n, H_d, classes)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    ids = list(range(n)) if image_ids is None else [int(i) for i in image_ids]
    parts = []
    for s in range(0, n, chunk):
        xs = x[s : s + chunk]
        m = xs.shape[0]
        if rng is not None:
            nz = defense.purifier.draw_noise(rng, (m * H_d, d))
        else:
            nz = _noise(defense, ids[s : s + chunk], trial, H_d, d, seed, tag)
        parts.append(defense.logits(np.repeat(xs, H_d, axis=0), nz).reshape(m, H_d, -1))
    return np.concatenate(parts, axis=0)


def expected_logits(x, defense, H_d: int, rng=None, **kw) -> np.ndarray:
    """Mean classifier logits over ``H_d`` purification replicates.

    Returns (classes,) for a single input and (n, classes) for a batch.
    """
    if H_d < 1:
        raise ValueError("H_d must be >= 1")
    single = np.ndim(x) == 1
    out = replicate_logits(x, defense, H_d, rng=rng, **kw).mean(axis=1)
    return out[0] if single else out


def aggregate(rep_logits: np.ndarray, aggregation: str = "mean_logits") -> np.ndarray:
    """Predicted class per image from (n, H, classes) replicate logits.

    Majority-vote ties go to the tied class with the largest mean logit.
    """
    mean = rep_logits.mean(axis=1)
    if aggregation == "mean_logits":
        return np.argmax(mean, axis=1)
    if aggregation != "majority_vote":
        raise ConfigError(f"unknown aggregation '{aggregation}'")
    votes = np.argmax(rep_logits, axis=2)
    c = rep_logits.shape[2]
    counts = np.stack([(votes == k).sum(axis=1) for k in range(c)], axis=1)
    tied = counts == counts.max(axis=1, keepdims=True)
    return np.argmax(np.where(tied, mean, -np.inf), axis=1)


def _margin_logits(mean_logits, labels):
    n = mean_logits.shape[0]
    correct = mean_logits[np.arange(n), labels]
    other = mean_logits.copy()
    other[np.arange(n), labels] = -np.inf
    return correct, other.max(axis=1)


def welch_p(a, b) -> float:
    """Two-sided Welch t-test p-value; two constant samples give 1 if equal and 0 otherwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("Welch test needs at least two observations per sample")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def stability_test(
    x,
    defense,
    H_d: int,
    trials: int,
    rng=None,
    *,
    labels=None,
    image_ids: Optional[Sequence[int]] = None,
    seed: int = 0,
    chunk: int = 64,
):
    """Welch p-value between the aggregated correct-class logit and the top
    incorrect logit across ``trials`` independent H_d-replicate estimates.

    Without ``labels`` the class predicted by the undefended classifier is
    taken as correct. Returns a float for a single input and an array for a
    batch.
    """
    if trials < 2:
        raise ValueError("stability_test needs trials >= 2")
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if labels is None:
        labels = defense.classifier.predict(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    corr, inc = [], []
    for r in range(trials):
        m = expected_logits(
            x, defense, H_d, rng=rng, image_ids=image_ids, trial=r, seed=seed, tag=streams.STABILITY, chunk=chunk
        )
        m = np.atleast_2d(m)
        c, i = _margin_logits(m, labels)
        corr.append(c)
        inc.append(i)
    corr, inc = np.array(corr), np.array(inc)
    p = np.array([welch_p(corr[:, k], inc[:, k]) for k in range(x.shape[0])])
    return float(p[0]) if single else p


def select_state(record, policy: str) -> np.ndarray:
    if policy == "final":
        return record.final
    if policy == "loss_optimized":
        return record.loss_optimized
    if policy == "first_broken":
        if record.first_broken is None:
            warnings.warn(
                f"image {record.image_id}: no first-broken state, using final", RuntimeWarning, stacklevel=2
            )
            return record.final
        return record.first_broken
    raise ConfigError(f"unknown state policy '{policy}'")


# ------------------------------------------------------------------ reports


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def validate_records(
    records,
    defense,
    config: ValidationConfig,
    *,
    defense_hash: Optional[str] = None,
    force: bool = False,
) -> ValidationReport:
    """OA, NA and AA of ``records`` under ``defense`` over ``config.trials`` fresh trials.

    Records whose ``meta["defense_hash"]`` differs from ``defense_hash``
    make the call fail unless ``force`` is set. Records missing an
    adversarial state are skipped and counted.
    """
    config.validate()
    usable = []
    skipped = 0
    for rec in records:
        if rec is None or rec.final is None:
            skipped += 1
            continue
        stored = rec.meta.get("defense_hash")
        if defense_hash is not None and stored is not None and stored != defense_hash:
            if not force:
                raise HashMismatch(
                    f"record {rec.image_id} was produced against defense {stored}, not {defense_hash}"
                )
            logger.warning("record %s: defense hash mismatch ignored (force)", rec.image_id)
        usable.append(rec)
    if not usable:
        raise ValueError("no usable adversarial records")
    ids = [r.image_id for r in usable]
    labels = np.array([r.label for r in usable], dtype=np.int64)
    originals = np.array([r.original for r in usable])
    fallbacks = sum(1 for r in usable if config.policy == "first_broken" and r.first_broken is None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        adv = np.array([select_state(r, config.policy) for r in usable])
    if fallbacks:
        logger.warning("%d records had no first-broken state; final state used", fallbacks)

    oa = float(np.mean(defense.classifier.predict(originals) == labels))
    kw = {"image_ids": ids, "seed": config.seed, "chunk": config.chunk}
    other = "majority_vote" if config.aggregation == "mean_logits" else "mean_logits"
    na_t, aa_t, na_v, aa_v, stab = [], [], [], [], []
    per_trial = []
    for r in range(config.trials):
        # common noise for both states: NA and AA of an image are a paired comparison
        nat = replicate_logits(originals, defense, config.H_d, trial=r, tag=streams.VALIDATE, **kw)
        adl = replicate_logits(adv, defense, config.H_d, trial=r, tag=streams.VALIDATE, **kw)
        na_pred = aggregate(nat, config.aggregation)
        aa_pred = aggregate(adl, config.aggregation)
        na_t.append(float(np.mean(na_pred == labels)))
        aa_t.append(float(np.mean(aa_pred == labels)))
        na_v.append(float(np.mean(aggregate(nat, other) == labels)))
        aa_v.append(float(np.mean(aggregate(adl, other) == labels)))
        stab.append(np.mean(np.argmax(adl, axis=2) == aa_pred[:, None], axis=1))
        c, i = _margin_logits(adl.mean(axis=1), labels)
        per_trial.append((na_pred == labels, aa_pred == labels, c, i))
    corr = np.array([t[2] for t in per_trial])
    inc = np.array([t[3] for t in per_trial])
    if config.trials >= 2:
        pvals = [welch_p(corr[:, k], inc[:, k]) for k in range(len(usable))]
    else:
        pvals = [math.nan] * len(usable)
    rows = []
    for k, img in enumerate(ids):
        for r, (na_ok, aa_ok, c, i) in enumerate(per_trial):
            rows.append(
                {
                    "image_id": int(img),
                    "policy": config.policy,
                    "H_d": config.H_d,
                    "trial": r,
                    "na_correct": int(na_ok[k]),
                    "aa_correct": int(aa_ok[k]),
                    "correct_logit": float(c[k]),
                    "top_incorrect_logit": float(i[k]),
                    "p_value": float(pvals[k]),
                }
            )
    return ValidationReport(
        OA=oa,
        NA=float(np.mean(na_t)),
        AA=float(np.mean(aa_t)),
        H_d=config.H_d,
        policy=config.policy,
        aggregation=config.aggregation,
        trials=config.trials,
        na_per_trial=na_t,
        aa_per_trial=aa_t,
        na_std=_std(na_t),
        aa_std=_std(aa_t),
        alt_aggregation=other,
        na_alt_per_trial=na_v,
        aa_alt_per_trial=aa_v,
        stability=np.mean(stab, axis=0).tolist(),
        rows=rows,
        n_images=len(usable),
        skipped=skipped,
        fallbacks=fallbacks,
    )
