"""
Run directories.

    <output_dir>/<name>[-k]/
        config.yaml            resolved configuration
        manifest.json          seeds and package versions
        rep_000/
            history.csv        round, is_authentic, test_accuracy, test_loss
            ledger.csv         deterministic cost columns
            timings.csv        wall-time columns
            summary.json
            model_final.npz
            snapshots/round_0040.npz
            traces/round_0040/{broadcast.bin, client_00.bin, meta.json}
        attacks/attack-000/    written by the attack command

Existing directories are never written to; a colliding name gets a numeric
suffix instead.
"""

import json
import os
from importlib import metadata
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from PIL import Image

from hefl.analysis import RunOutcome
from hefl.attack.sweep import RoundArtifact, RunArtifacts, uplink_learning_rate
from hefl.config import ExperimentConfig
from hefl.crypto import EncryptionMask, MaskedModel, decrypt_masked, deserialize_masked
from hefl.errors import ArtifactError
from hefl.protocol import CostLedger, HistoryRecord, TrainingResult, build_federation, run_keypair
from hefl.seeding import derive_seed

CONFIG_FILE = "config.yaml"
MANIFEST_FILE = "manifest.json"
PACKAGES = ("hefl", "numpy", "scipy", "phe", "pydantic", "msgpack")


def allocate_dir(parent: str, name: str) -> str:
    """Creates ``parent/name``, or ``parent/name-1``, ``-2``... when taken."""
    os.makedirs(parent, exist_ok=True)
    candidate, k = os.path.join(parent, name), 0
    while True:
        try:
            os.makedirs(candidate)
            return candidate
        except FileExistsError:
            k += 1
            candidate = os.path.join(parent, f"{name}-{k}")
            if k == 1:
                logger.warning(f"{os.path.join(parent, name)} exists; writing to a new directory")


def repetition_seed(config: ExperimentConfig, repetition: int) -> int:
    return derive_seed(config.run.seed, "repetition", repetition)


def _versions() -> Dict[str, str]:
    versions = {}
    for package in PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def write_run_header(run_dir: str, config: ExperimentConfig):
    with open(os.path.join(run_dir, CONFIG_FILE), "w") as f:
        f.write(config.to_yaml())
    manifest = {
        "seed": config.run.seed,
        "repetition_seeds": [repetition_seed(config, r) for r in range(config.run.repetitions)],
        "versions": _versions(),
    }
    with open(os.path.join(run_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2)


def load_config(run_dir: str) -> ExperimentConfig:
    path = os.path.join(run_dir, CONFIG_FILE)
    if not os.path.exists(path):
        raise ArtifactError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    with open(path, "r") as f:
        return ExperimentConfig.from_yaml(f.read())


def repetition_dir(run_dir: str, repetition: int) -> str:
    return os.path.join(run_dir, f"rep_{repetition:03d}")


def history_frame(history: Sequence[HistoryRecord]) -> pd.DataFrame:
    return pd.DataFrame([h.dict() for h in history], columns=list(HistoryRecord.__fields__))


def save_repetition(rep_dir: str, result: TrainingResult):
    os.makedirs(rep_dir)
    history_frame(result.history).to_csv(os.path.join(rep_dir, "history.csv"), index=False)
    result.ledger.ledger_frame().to_csv(os.path.join(rep_dir, "ledger.csv"), index=False)
    result.ledger.timings_frame().to_csv(os.path.join(rep_dir, "timings.csv"), index=False)
    np.savez(os.path.join(rep_dir, "model_final.npz"), flat=result.final_model.flat)

    peak_round, peak_accuracy = result.peak
    summary = {
        "seed": result.seed,
        "rounds": len(result.history),
        "converged_round": result.converged_round,
        "final_accuracy": result.history[-1].test_accuracy,
        "peak_round": peak_round,
        "peak_accuracy": peak_accuracy,
        "eta": result.mask.eta,
        "encrypted_parameters": result.mask.popcount,
        "key_fingerprint": result.key_fingerprint,
        "totals": result.ledger.totals(),
    }
    with open(os.path.join(rep_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)

    if result.snapshots:
        os.makedirs(os.path.join(rep_dir, "snapshots"))
        for t, flat in result.snapshots.items():
            np.savez(os.path.join(rep_dir, "snapshots", f"round_{t:04d}.npz"), flat=flat)

    for t, trace in result.traces.items():
        trace_dir = os.path.join(rep_dir, "traces", f"round_{t:04d}")
        os.makedirs(trace_dir)
        with open(os.path.join(trace_dir, "broadcast.bin"), "wb") as f:
            f.write(trace.broadcast)
        for client_id, payload in sorted(trace.uplinks.items()):
            with open(os.path.join(trace_dir, f"client_{client_id:02d}.bin"), "wb") as f:
                f.write(payload)
        meta = {"round": t, "is_authentic": trace.is_authentic, "mask": result.mask.run_lengths()}
        with open(os.path.join(trace_dir, "meta.json"), "w") as f:
            json.dump(meta, f)


def load_repetition(rep_dir: str) -> Tuple[List[HistoryRecord], CostLedger]:
    try:
        history = pd.read_csv(os.path.join(rep_dir, "history.csv"))
        ledger = pd.read_csv(os.path.join(rep_dir, "ledger.csv"))
        timings_path = os.path.join(rep_dir, "timings.csv")
        timings = pd.read_csv(timings_path) if os.path.exists(timings_path) else None
    except (OSError, pd.errors.ParserError) as e:
        raise ArtifactError(f"cannot read repetition {rep_dir}: {e}") from e
    records = [HistoryRecord(**row) for row in history.to_dict(orient="records")]
    return records, CostLedger.from_frames(ledger, timings)


def load_run_outcomes(run_dir: str) -> List[RunOutcome]:
    config = load_config(run_dir)
    outcomes = []
    for repetition in range(config.run.repetitions):
        rep_dir = repetition_dir(run_dir, repetition)
        if not os.path.isdir(rep_dir):
            raise ArtifactError(f"{run_dir}: repetition {repetition} is missing")
        history, ledger = load_repetition(rep_dir)
        outcomes.append(RunOutcome.from_training(config, history, ledger, repetition))
    return outcomes


def _uplink_view(reply: MaskedModel) -> np.ndarray:
    """What an eavesdropper reads from a reply: plaintext values, zero on encrypted positions."""
    if not reply.is_encrypted:
        return reply.plain.copy()
    observed = np.zeros(len(reply))
    observed[~reply.mask.bits] = reply.plain
    return observed


def load_attack_artifacts(run_dir: str, repetition: int, round_ids: Sequence[int]) -> RunArtifacts:
    """
    Rebuilds what an attacker on the given rounds sees: the model spec, the
    data pools and client datasets of the repetition and, per round, the
    broadcast model entering it and the saved client replies. Encrypted
    broadcasts are opened with the run key, regenerated from the repetition
    seed; encrypted reply positions are left hidden.

    Raises:
        ArtifactError: When a requested round was not traced.
    """
    config = load_config(run_dir)
    seed = repetition_seed(config, repetition)
    rep_dir = repetition_dir(run_dir, repetition)
    federation = build_federation(config, seed)
    local = config.local
    key = None
    rounds: Dict[int, RoundArtifact] = {}
    for t in round_ids:
        trace_dir = os.path.join(rep_dir, "traces", f"round_{t:04d}")
        if not os.path.isdir(trace_dir):
            raise ArtifactError(f"round {t} was not traced in {rep_dir}; rerun training with --run.trace_rounds")
        with open(os.path.join(trace_dir, "meta.json"), "r") as f:
            meta = json.load(f)
        with open(os.path.join(trace_dir, "broadcast.bin"), "rb") as f:
            broadcast = deserialize_masked(f.read())
        mask = EncryptionMask.from_run_lengths(meta["mask"])
        if broadcast.is_encrypted:
            key = key or run_keypair(config, seed)
            previous = decrypt_masked(broadcast, mask, key).flat
        else:
            previous = broadcast.to_params().flat

        uplinks, uplink_lr = {}, {}
        for name in sorted(os.listdir(trace_dir)):
            if not (name.startswith("client_") and name.endswith(".bin")):
                continue
            client_id = int(name[len("client_") : -len(".bin")])
            if client_id >= len(federation.clients):
                raise ArtifactError(f"{trace_dir}/{name} names a client outside the federation")
            with open(os.path.join(trace_dir, name), "rb") as f:
                uplinks[client_id] = _uplink_view(deserialize_masked(f.read()))
            data = federation.clients[client_id]
            samples = len(data.authentic if meta["is_authentic"] else data.synthetic)
            uplink_lr[client_id] = uplink_learning_rate(local.lr, samples, local.batch_size, local.epochs)

        rounds[t] = RoundArtifact(
            round=t,
            is_authentic=meta["is_authentic"],
            previous=previous,
            mask_bits=mask.bits,
            lr=local.lr,
            uplinks=uplinks,
            uplink_lr=uplink_lr,
        )
    return RunArtifacts(
        spec=federation.spec,
        authentic_pool=federation.authentic_pool,
        synthetic_pool=federation.synthetic_pool,
        rounds=rounds,
        clients=federation.clients,
    )


def save_image(path: str, image: np.ndarray):
    """Writes a ``(C, H, W)`` image in ``[0, 1]`` as PGM (one channel) or PPM (three channels)."""
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if pixels.ndim == 3 and pixels.shape[0] == 1:
        pixels = pixels[0]
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        pixels = np.transpose(pixels, (1, 2, 0))
    elif pixels.ndim == 3:
        pixels = pixels.mean(axis=0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def image_suffix(image: np.ndarray) -> str:
    return ".ppm" if np.ndim(image) == 3 and np.shape(image)[0] == 3 else ".pgm"
