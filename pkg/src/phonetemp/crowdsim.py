"""Crowdsourcing group construction from per-phone datasets and the automatic
inferred-label pipeline for newly joined phones.

Label matching uses a 0.1 degC grid: two samples are considered to share a
label when their labels quantize to the same grid point. Raw labels are kept
for training and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PhoneDataset, Sample
from .estimator import Answer, EstimatorModel, predict_batch
from .nn import SIGMA_FLOOR
from .truthinf import AggregatorModel, AnswerGroup, cbts_fold

LABEL_GRID = 0.1
GROUP_RETRY_BUDGET = 100


def label_key(label: float) -> int:
    """Quantize a label to its matching-grid index."""
    return int(round(label / LABEL_GRID))


@dataclass
class CrowdGroup:
    """Samples from distinct phones sharing one true ambient temperature."""

    members: list[tuple[str, Sample]]
    common_label: float

    def __post_init__(self):
        if not 2 <= len(self.members) <= 6:
            raise ValueError("a crowd group holds 2 to 6 members")
        ids = [pid for pid, _ in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("member phones must be distinct")
        key = label_key(self.common_label)
        for pid, sample in self.members:
            if label_key(sample.label) != key:
                raise ValueError(f"member {pid} label does not match the common label")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class LabeledByCrowd:
    """A participant sample plus its crowd-inferred label."""

    sample: Sample
    inferred_label: float
    inferred_sigma: float
    contributor_count: int

    def __post_init__(self):
        if self.contributor_count < 2:
            raise ValueError("need answers from at least 2 contributors")
        if self.inferred_sigma < SIGMA_FLOOR:
            raise ValueError("inferred sigma below the floor")


def _label_index(dataset: PhoneDataset) -> dict[int, list[int]]:
    index: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        index.setdefault(label_key(s.label), []).append(i)
    return index


def build_group_set(
    contributors: list[PhoneDataset],
    n_groups: int,
    seed: int,
    k_range: tuple[int, int] = (2, 6),
) -> list[CrowdGroup]:
    """Build crowdsourcing groups: pick k phones, a shared label, one matching
    sample per phone. Groups whose phone choice has no common label are
    resampled within a bounded retry budget."""
    if len(contributors) < 2:
        raise ValueError("need at least 2 contributors")
    rng = np.random.default_rng(seed)
    indices = [_label_index(ds) for ds in contributors]
    key_sets = [set(ix) for ix in indices]

    groups: list[CrowdGroup] = []
    for _ in range(n_groups):
        for attempt in range(GROUP_RETRY_BUDGET + 1):
            k = int(rng.integers(k_range[0], min(k_range[1], len(contributors)) + 1))
            chosen = rng.choice(len(contributors), size=k, replace=False)
            common = set.intersection(*(key_sets[i] for i in chosen))
            if common:
                break
        else:
            ids = [contributors[i].phone_id for i in chosen]
            raise RuntimeError(f"no common label for phones {ids} after retries")
        key = sorted(common)[int(rng.integers(len(common)))]
        members = []
        for i in chosen:
            rows = indices[i][key]
            sample = contributors[i].samples[rows[int(rng.integers(len(rows)))]]
            members.append((contributors[i].phone_id, sample))
        groups.append(CrowdGroup(members, members[0][1].label))
    return groups


def answers_for_group(
    group: CrowdGroup, registry: dict[str, EstimatorModel]
) -> AnswerGroup:
    """One predicted answer per member, carrying the group's true label."""
    answers, ids = [], []
    for pid, sample in group.members:
        if pid not in registry:
            raise KeyError(f"no trained estimator for phone {pid!r}")
        mu, sigma = predict_batch(registry[pid], [sample])
        answers.append(Answer(float(mu[0]), float(sigma[0])))
        ids.append(pid)
    return AnswerGroup(answers, ids, true_label=group.common_label)


def answer_groups_for(
    groups: list[CrowdGroup], registry: dict[str, EstimatorModel]
) -> list[AnswerGroup]:
    """answers_for_group over many groups with batched per-phone prediction."""
    per_phone: dict[str, list[tuple[int, int, Sample]]] = {}
    for gi, group in enumerate(groups):
        for mi, (pid, sample) in enumerate(group.members):
            if pid not in registry:
                raise KeyError(f"no trained estimator for phone {pid!r}")
            per_phone.setdefault(pid, []).append((gi, mi, sample))
    slots: dict[tuple[int, int], Answer] = {}
    for pid, entries in per_phone.items():
        mu, sigma = predict_batch(registry[pid], [s for _, _, s in entries])
        for (gi, mi, _), m, s in zip(entries, mu, sigma):
            slots[(gi, mi)] = Answer(float(m), float(s))
    out = []
    for gi, group in enumerate(groups):
        out.append(
            AnswerGroup(
                [slots[(gi, mi)] for mi in range(len(group))],
                [pid for pid, _ in group.members],
                true_label=group.common_label,
            )
        )
    return out


def infer_labels_for_participant(
    participant_train: PhoneDataset,
    contributors: list[PhoneDataset],
    registry: dict[str, EstimatorModel],
    cbts: AggregatorModel,
    seed: int,
    k_range: tuple[int, int] = (2, 6),
) -> tuple[list[LabeledByCrowd], int]:
    """Crowd-label every participant training sample.

    For each sample, k contributor instances with the same (grid) label are
    drawn from k distinct phones, their answers folded through the CBTS
    model, and the folded value attached as the inferred label. Samples whose
    label matches fewer than 2 contributors are skipped; the skip count is
    returned. The participant's own model and true label are never consulted.
    """
    rng = np.random.default_rng(seed)
    indices = [_label_index(ds) for ds in contributors]
    labeled: list[LabeledByCrowd] = []
    skipped = 0
    for sample in participant_train.samples:
        key = label_key(sample.label)
        holders = [i for i, ix in enumerate(indices) if key in ix]
        if len(holders) < 2:
            skipped += 1
            continue
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        k = min(k, len(holders))
        chosen = rng.choice(len(holders), size=k, replace=False)
        answers, ids = [], []
        for hi in chosen:
            ci = holders[hi]
            rows = indices[ci][key]
            member = contributors[ci].samples[rows[int(rng.integers(len(rows)))]]
            mu, sigma = predict_batch(registry[contributors[ci].phone_id], [member])
            answers.append(Answer(float(mu[0]), float(sigma[0])))
            ids.append(contributors[ci].phone_id)
        folded = cbts_fold(cbts, AnswerGroup(answers, ids))
        labeled.append(LabeledByCrowd(sample, folded.mu, folded.sigma, k))
    return labeled, skipped


def label_quality(labeled: list[LabeledByCrowd], truths) -> float:
    """Mean absolute error between inferred and true labels, in degC."""
    if not labeled:
        raise ValueError("no labeled samples")
    truths = np.asarray(truths, dtype=np.float64)
    inferred = np.array([lb.inferred_label for lb in labeled])
    if truths.shape != inferred.shape:
        raise ValueError("one truth per labeled sample")
    return float(np.mean(np.abs(inferred - truths)))
