"""
Attack sweeps over saved training rounds.

Two sources of updates are attacked. ``simulated`` replays single-image
victim updates from the broadcast model of each round, the setting in which
gradient inversion is strongest. ``uplink`` attacks the replies the clients
actually sent, whose multi-step, multi-sample training degrades the attack;
their encrypted positions stay hidden.

Authentic rounds are summarised by the best score per metric, synthetic
rounds by the mean. Synthetic replies leak synthetic images, so those
recoveries are scored against their best-matching authentic image (by
MS-SSIM); uplink recoveries of authentic rounds are scored against the best
match in the sending client's authentic data.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
from loguru import logger

from hefl.attack.dlg import AttackResult, AttackTarget, dlg_attack, victim_update
from hefl.attack.metrics import msssim, score_all
from hefl.data import ClientDataset, ImageSet
from hefl.errors import ArtifactError, AttackError
from hefl.nncore import ModelSpec
from hefl.seeding import derive_seed

SCORES = ("uqi", "msssim", "vif")
SOURCES = ("simulated", "uplink")


class RoundArtifact(pydantic.BaseModel):
    round: int
    is_authentic: bool
    previous: np.ndarray = pydantic.Field(..., description="Decrypted broadcast model entering the round.")
    mask_bits: np.ndarray
    lr: float
    uplinks: Dict[int, np.ndarray] = pydantic.Field({}, description="Plaintext part of each client reply, zero where encrypted.")
    uplink_lr: Dict[int, float] = pydantic.Field({}, description="Per client, learning rate times local SGD steps.")

    class Config:
        arbitrary_types_allowed = True


class RunArtifacts(pydantic.BaseModel):
    spec: ModelSpec
    authentic_pool: ImageSet
    synthetic_pool: ImageSet
    rounds: Dict[int, RoundArtifact]
    clients: List[ClientDataset] = []

    class Config:
        arbitrary_types_allowed = True


class AttackReportRow(pydantic.BaseModel):
    round: int
    is_authentic: bool
    client_id: int = pydantic.Field(-1, description="Sender of an attacked uplink; -1 for simulated victims.")
    image_id: int
    label: int
    reference_id: int
    uqi: float
    msssim: float
    vif: float
    matching_loss: float
    iterations: int
    diverged: bool


class ScoreTable(pydantic.BaseModel):
    rows: List[AttackReportRow]
    recoveries: Dict[Tuple[int, int, int], np.ndarray] = pydantic.Field({}, description="Keyed by (round, client_id, image_id).")

    class Config:
        arbitrary_types_allowed = True

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.dict() for r in self.rows], columns=list(AttackReportRow.__fields__))

    def summary(self) -> pd.DataFrame:
        """One row per round: max per metric for authentic rounds, mean for synthetic rounds."""
        frame = self.to_frame()
        out = []
        for round_id, group in frame.groupby("round", sort=True):
            authentic = bool(group["is_authentic"].iloc[0])
            agg = group[list(SCORES)].max() if authentic else group[list(SCORES)].mean()
            out.append({"round": round_id, "is_authentic": authentic, "aggregate": "max" if authentic else "mean", **agg.to_dict()})
        return pd.DataFrame(out, columns=["round", "is_authentic", "aggregate", *SCORES])

    def best(self, round_id: int, metric: str) -> AttackReportRow:
        candidates = [r for r in self.rows if r.round == round_id]
        return max(candidates, key=lambda r: getattr(r, metric))

    def recovery(self, row: AttackReportRow) -> np.ndarray:
        return self.recoveries[(row.round, row.client_id, row.image_id)]


def uplink_learning_rate(lr: float, samples: int, batch_size: int, epochs: int) -> float:
    """Step an attacker divides a reply by: ``lr`` times the client's local SGD steps."""
    return lr * epochs * math.ceil(samples / batch_size)


def select_victims(pool: ImageSet, images_per_class: int, seed: int) -> List[int]:
    """Positions of the first ``images_per_class`` images of every class in a seeded order."""
    order = np.random.default_rng(seed).permutation(len(pool))
    chosen, counts = [], {}
    for i in order:
        label = int(pool.labels[i])
        if counts.get(label, 0) < images_per_class:
            counts[label] = counts.get(label, 0) + 1
            chosen.append(int(i))
    return sorted(chosen)


def best_reference(recovered: np.ndarray, references: ImageSet) -> int:
    """Position of the reference image most similar to ``recovered`` by MS-SSIM (lowest index on ties)."""
    scores = [msssim(image, recovered) for image in references.images]
    return int(np.argmax(scores))


def _row(snapshot: RoundArtifact, result: AttackResult, reference: np.ndarray, reference_id: int, **fields) -> AttackReportRow:
    return AttackReportRow(
        round=snapshot.round,
        is_authentic=snapshot.is_authentic,
        reference_id=reference_id,
        matching_loss=result.matching_loss,
        iterations=result.iterations,
        diverged=result.diverged,
        **fields,
        **score_all(reference, result.image),
    )


def _attack_victim(
    artifacts: RunArtifacts, snapshot: RoundArtifact, pool: ImageSet, position: int, seed: int, **attack
) -> Tuple[AttackReportRow, np.ndarray]:
    spec = artifacts.spec
    image, label, sample_id = pool.images[position], int(pool.labels[position]), int(pool.ids[position])
    observed = victim_update(spec, snapshot.previous, image, label, snapshot.lr)
    target = AttackTarget.from_round(spec, snapshot.previous, observed, snapshot.mask_bits, snapshot.is_authentic, snapshot.lr)
    result = dlg_attack(target, seed=derive_seed(seed, "dlg", sample_id), **attack)
    if snapshot.is_authentic:
        reference, reference_id = image, sample_id
    else:
        ref = best_reference(result.image, artifacts.authentic_pool)
        reference, reference_id = artifacts.authentic_pool.images[ref], int(artifacts.authentic_pool.ids[ref])
    return _row(snapshot, result, reference, reference_id, image_id=sample_id, label=label), result.image


def _attack_uplink(
    artifacts: RunArtifacts, snapshot: RoundArtifact, client_id: int, seed: int, **attack
) -> Tuple[AttackReportRow, np.ndarray]:
    spec = artifacts.spec
    lr = snapshot.uplink_lr[client_id]
    target = AttackTarget.from_round(spec, snapshot.previous, snapshot.uplinks[client_id], snapshot.mask_bits, snapshot.is_authentic, lr)
    result = dlg_attack(target, seed=derive_seed(derive_seed(seed, "dlg-uplink", snapshot.round), "client", client_id), **attack)
    references = artifacts.clients[client_id].authentic if snapshot.is_authentic else artifacts.authentic_pool
    ref = best_reference(result.image, references)
    reference_id = int(references.ids[ref])
    row = _row(
        snapshot, result, references.images[ref], reference_id, client_id=client_id, image_id=reference_id, label=int(references.labels[ref])
    )
    return row, result.image


def score_attack_sweep(
    artifacts: RunArtifacts,
    round_ids: Sequence[int],
    images_per_class: int = 10,
    iterations: int = 500,
    step: float = 0.05,
    seed: int = 0,
    fd_step: float = 1e-4,
    workers: int = 1,
    optimizer: str = "lbfgs",
    source: str = "simulated",
) -> ScoreTable:
    """
    Attacks the rounds of ``round_ids``: ``images_per_class`` simulated
    victims per class, or every saved client reply for the ``uplink`` source.

    Raises:
        ArtifactError: When a requested round has no saved artifacts, or no
            saved replies for the ``uplink`` source.
        AttackError: On an unknown source.
    """
    if source not in SOURCES:
        raise AttackError(f"unknown attack source {source!r}, expected one of {SOURCES}")
    missing = [t for t in round_ids if t not in artifacts.rounds]
    if missing:
        raise ArtifactError(f"no saved artifacts for round(s) {missing}")
    if source == "uplink":
        bare = [t for t in round_ids if not artifacts.rounds[t].uplinks]
        if bare:
            raise ArtifactError(f"no saved client replies for round(s) {bare}")
    attack = dict(iterations=iterations, step=step, fd_step=fd_step, optimizer=optimizer)
    rows: List[AttackReportRow] = []
    recoveries: Dict[Tuple[int, int, int], np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool_executor:
        for t in round_ids:
            snapshot = artifacts.rounds[t]
            kind = "authentic" if snapshot.is_authentic else "synthetic"
            if source == "uplink":
                jobs = sorted(snapshot.uplinks)
                logger.info(f"Attacking round {t} ({kind}): replies of clients {jobs}")

                def _run(client_id: int):
                    return _attack_uplink(artifacts, snapshot, client_id, seed, **attack)

            else:
                pool = artifacts.authentic_pool if snapshot.is_authentic else artifacts.synthetic_pool
                jobs = select_victims(pool, images_per_class, derive_seed(seed, "victims", t))
                logger.info(f"Attacking round {t} ({kind}): {len(jobs)} victims")

                def _run(position: int):
                    return _attack_victim(artifacts, snapshot, pool, position, seed, **attack)

            results = list(pool_executor.map(_run, jobs)) if workers > 1 else [_run(j) for j in jobs]
            for row, image in results:
                rows.append(row)
                recoveries[(row.round, row.client_id, row.image_id)] = image
                logger.debug(
                    f"Round:{row.round} | Client:{row.client_id} | Image:{row.image_id} | UQI:{row.uqi:.3f} | "
                    f"MSSSIM:{row.msssim:.3f} | VIF:{row.vif:.3f} | Loss:{row.matching_loss:.3e}"
                )
    return ScoreTable(rows=rows, recoveries=recoveries)


def random_baseline(artifacts: RunArtifacts, count: int = 10, seed: int = 0) -> Dict[str, float]:
    """Mean scores of uniform-noise images against their best-matching authentic images."""
    rng = np.random.default_rng(derive_seed(seed, "random-baseline"))
    totals = {name: 0.0 for name in SCORES}
    for _ in range(count):
        noise = rng.uniform(0.0, 1.0, size=artifacts.spec.input_shape)
        reference = artifacts.authentic_pool.images[best_reference(noise, artifacts.authentic_pool)]
        for name, value in score_all(reference, noise).items():
            totals[name] += value / count
    return totals


def recovery_pairs(table: ScoreTable, artifacts: RunArtifacts, round_id: int) -> Dict[str, Tuple[np.ndarray, np.ndarray, AttackReportRow]]:
    """Per metric, the ``(reference, recovered, row)`` with the highest score in ``round_id``."""
    by_id = {int(i): k for k, i in enumerate(artifacts.authentic_pool.ids)}
    by_id_syn = {int(i): k for k, i in enumerate(artifacts.synthetic_pool.ids)}
    pairs = {}
    for metric in SCORES:
        row = table.best(round_id, metric)
        position: Optional[int] = by_id.get(row.reference_id)
        reference = artifacts.authentic_pool.images[position] if position is not None else artifacts.synthetic_pool.images[by_id_syn[row.reference_id]]
        pairs[metric] = (reference, table.recovery(row), row)
    return pairs
