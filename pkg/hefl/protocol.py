"""
Interleaved federated training.

Every round each client receives the broadcast model, trains locally and
replies. In authentic rounds clients train on their authentic data and reply
with selectively encrypted models, which the server averages homomorphically;
in synthetic rounds they train on their synthetic data and reply in
plaintext. Messages travel as serialized buffers through an in-process
``MessageTrace``, so byte counts are those of the real wire format.
"""

import collections
import time
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
from loguru import logger

from hefl.analysis import RunOutcome, detect_convergence
from hefl.crypto import (
    EncryptionMask,
    Keypair,
    MaskedModel,
    SchemeParams,
    add_weighted,
    build_mask,
    decrypt_masked,
    deserialize_masked,
    encrypt_masked,
    keygen,
    plain_model,
    scale_masked,
    serialize_masked,
    wire_size,
)
from hefl.data import ClientDataset, ImageSet, build_client_datasets, load_cifar10_dir, make_toy_dataset, split_authentic_synthetic
from hefl.errors import AggregationError, ConfigError, EmptyDatasetError, MaskMismatchError
from hefl.nncore import ModelParams, ModelSpec, backward, build_model_spec, evaluate, forward, init_params, train_local
from hefl.seeding import derive_seed

if TYPE_CHECKING:
    from hefl.config import ExperimentConfig

WEIGHT_TOLERANCE = 1e-12


class RoundSchedule(pydantic.BaseModel):
    """
    Interleaving of authentic and synthetic rounds: out of every ``rho_tot``
    consecutive rounds the last ``rho_syn`` are synthetic.
    """

    rho_syn: int = pydantic.Field(0, ge=0, description="Synthetic rounds per cycle.")
    rho_tot: int = pydantic.Field(1, ge=1, description="Rounds per cycle.")

    class Config:
        validate_assignment = True

    @pydantic.root_validator(skip_on_failure=True)
    def _check_ratio(cls, values):
        if values["rho_syn"] >= values["rho_tot"]:
            raise ValueError(f"rho_syn ({values['rho_syn']}) must be smaller than rho_tot ({values['rho_tot']})")
        return values

    @property
    def rho(self) -> float:
        return self.rho_syn / self.rho_tot


def is_authentic_round(t: int, schedule: RoundSchedule) -> bool:
    if t < 0:
        raise ValueError(f"round index must be non-negative, got {t}")
    return t % schedule.rho_tot < schedule.rho_tot - schedule.rho_syn


class LocalHyperparams(pydantic.BaseModel):
    lr: float = pydantic.Field(0.01, gt=0, description="Local SGD learning rate.")
    batch_size: int = pydantic.Field(32, ge=1)
    epochs: int = pydantic.Field(1, ge=1, description="Local epochs per round.")

    class Config:
        validate_assignment = True


class ClientCosts(pydantic.BaseModel):
    """Per-client, per-round cost counters filled in by client_round."""

    enc_ops: int = 0
    dec_ops: int = 0
    uplink_plaintext_bytes: int = 0
    uplink_ciphertext_bytes: int = 0
    samples: int = 0
    train_time: float = 0.0
    enc_time: float = 0.0
    dec_time: float = 0.0


class RoundRecord(pydantic.BaseModel):
    """
    One ledger row, summed over clients. Broadcast bytes count the downlink
    message once per receiving client.
    """

    round: int
    is_authentic: bool
    uplink_plaintext_bytes: int = 0
    uplink_ciphertext_bytes: int = 0
    broadcast_plaintext_bytes: int = 0
    broadcast_ciphertext_bytes: int = 0
    enc_ops: int = 0
    dec_ops: int = 0
    samples: int = 0
    train_time: float = 0.0
    enc_time: float = 0.0
    dec_time: float = 0.0
    agg_time: float = 0.0


DETERMINISTIC_COLUMNS = [
    "round",
    "is_authentic",
    "uplink_plaintext_bytes",
    "uplink_ciphertext_bytes",
    "broadcast_plaintext_bytes",
    "broadcast_ciphertext_bytes",
    "enc_ops",
    "dec_ops",
    "samples",
]
TIMING_COLUMNS = ["round", "train_time", "enc_time", "dec_time", "agg_time"]


class CostLedger(pydantic.BaseModel):
    records: List[RoundRecord] = []

    def append(self, record: RoundRecord):
        if self.records and record.round <= self.records[-1].round:
            raise ValueError(f"ledger rounds must increase, got {record.round} after {self.records[-1].round}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.dict() for r in self.records], columns=list(RoundRecord.__fields__))

    def ledger_frame(self) -> pd.DataFrame:
        """Columns that are identical across reruns of the same configuration."""
        return self.to_frame()[DETERMINISTIC_COLUMNS]

    def timings_frame(self) -> pd.DataFrame:
        return self.to_frame()[TIMING_COLUMNS]

    def cumulative(self) -> pd.DataFrame:
        frame = self.to_frame().set_index("round")
        return frame.drop(columns=["is_authentic"]).cumsum()

    def totals(self, rounds: Optional[int] = None) -> Dict[str, float]:
        """Column sums over the first ``rounds`` rounds (all rounds when None)."""
        records = self.records if rounds is None else self.records[:rounds]
        keys = [k for k in RoundRecord.__fields__ if k not in ("round", "is_authentic")]
        return {k: sum(getattr(r, k) for r in records) for k in keys}

    @classmethod
    def from_frames(cls, ledger: pd.DataFrame, timings: Optional[pd.DataFrame] = None) -> "CostLedger":
        frame = ledger if timings is None else ledger.merge(timings, on="round")
        return cls(records=[RoundRecord(**row) for row in frame.to_dict(orient="records")])


class HistoryRecord(pydantic.BaseModel):
    round: int
    is_authentic: bool
    test_accuracy: float = pydantic.Field(..., description="Accuracy of the broadcast model in percent.")
    test_loss: float


class ClientState(pydantic.BaseModel):
    client_id: int
    data: ClientDataset
    spec: ModelSpec
    key: Keypair
    mask: EncryptionMask
    hyper: LocalHyperparams
    seed: int
    params: Optional[ModelParams] = None

    class Config:
        arbitrary_types_allowed = True


class Envelope(pydantic.BaseModel):
    round: int
    direction: str
    client_id: int
    payload: bytes


class RoundTrace(pydantic.BaseModel):
    """Serialized messages of one round, kept for later inspection."""

    round: int
    is_authentic: bool
    broadcast: bytes = pydantic.Field(..., description="Model received by every client (w^{t-1}).")
    uplinks: Dict[int, bytes] = {}


class MessageTrace:
    """
    Ordered in-process transport. Payloads of rounds listed in
    ``retain_rounds`` are kept after delivery.
    """

    def __init__(self, retain_rounds: Sequence[int] = ()):
        self.retain_rounds = set(retain_rounds)
        self.queues: Dict[Tuple[str, int], Deque[Envelope]] = collections.defaultdict(collections.deque)
        self.retained: Dict[int, RoundTrace] = {}

    def send(self, t: int, direction: str, client_id: int, payload: bytes, is_authentic: bool = True):
        self.queues[(direction, client_id)].append(Envelope(round=t, direction=direction, client_id=client_id, payload=payload))
        if t in self.retain_rounds:
            if direction == "down":
                self.retained.setdefault(t, RoundTrace(round=t, is_authentic=is_authentic, broadcast=payload))
            else:
                self.retained[t].uplinks[client_id] = payload

    def receive(self, direction: str, client_id: int) -> Envelope:
        queue = self.queues[(direction, client_id)]
        if not queue:
            raise AggregationError(f"no {direction} message pending for client {client_id}")
        return queue.popleft()


class ServerState(pydantic.BaseModel):
    mask: EncryptionMask
    num_clients: int = pydantic.Field(..., ge=1)
    round: int = 0
    received: Dict[int, MaskedModel] = {}
    weights: Dict[int, float] = {}

    class Config:
        arbitrary_types_allowed = True

    def receive(self, client_id: int, model: MaskedModel, weight: float):
        self.received[client_id] = model
        self.weights[client_id] = weight

    def ready(self) -> bool:
        return len(self.received) == self.num_clients

    def aggregate(self, is_authentic: bool) -> MaskedModel:
        if not self.ready():
            missing = sorted(set(range(self.num_clients)) - set(self.received))
            raise AggregationError(f"round {self.round}: missing models from clients {missing}")
        order = sorted(self.received)
        model = server_aggregate([self.received[i] for i in order], [self.weights[i] for i in order], self.mask, is_authentic)
        self.received, self.weights = {}, {}
        self.round += 1
        return model


# --- Client and server steps.


def client_round(
    state: ClientState,
    incoming: MaskedModel,
    is_auth: bool,
    round_index: int = 0,
    costs: Optional[ClientCosts] = None,
) -> MaskedModel:
    """
    One client round: decrypt the broadcast if it is encrypted, train on the
    authentic or synthetic dataset, and reply encrypted (authentic rounds) or
    in plaintext (synthetic rounds).

    Raises:
        MaskMismatchError: When an encrypted broadcast uses a different mask.
        EmptyDatasetError: When the dataset for this round is empty.
    """
    costs = costs if costs is not None else ClientCosts()
    if incoming.is_encrypted:
        if not incoming.mask.same_as(state.mask):
            raise MaskMismatchError(f"client {state.client_id}: broadcast mask differs from the run mask")
        start = time.perf_counter()
        params = decrypt_masked(incoming, state.mask, state.key)
        costs.dec_time += time.perf_counter() - start
        costs.dec_ops += 1
    else:
        params = incoming.to_params()

    dataset = state.data.authentic if is_auth else state.data.synthetic
    if len(dataset) == 0:
        raise EmptyDatasetError(f"client {state.client_id} has no {'authentic' if is_auth else 'synthetic'} samples")
    start = time.perf_counter()
    params = train_local(
        state.spec,
        params,
        dataset,
        epochs=state.hyper.epochs,
        batch_size=state.hyper.batch_size,
        lr=state.hyper.lr,
        seed=derive_seed(state.seed, "train", round_index),
    )
    costs.train_time += time.perf_counter() - start
    costs.samples += len(dataset)
    state.params = params

    if is_auth:
        start = time.perf_counter()
        out = encrypt_masked(params, state.mask, state.key, seed=derive_seed(state.seed, "encrypt", round_index))
        costs.enc_time += time.perf_counter() - start
        costs.enc_ops += 1
    else:
        out = plain_model(params)
    total, cipher = wire_size(out)
    costs.uplink_ciphertext_bytes += cipher
    costs.uplink_plaintext_bytes += total - cipher
    logger.trace(f"Client {state.client_id} round {round_index}: {len(dataset)} samples, {total} bytes out")
    return out


def server_aggregate(states: Sequence[MaskedModel], weights: Sequence[float], mask: EncryptionMask, is_auth: bool) -> MaskedModel:
    """
    Weighted average ``sum_i w_i x_i`` accumulated in the given order, under
    encryption on the masked positions in authentic rounds.

    Raises:
        AggregationError: On empty input, weights not summing to one, mixed
            encryption status, or a message that does not match the round type.
        MaskMismatchError: When an encrypted message uses a different mask.
    """
    if not states:
        raise AggregationError("nothing to aggregate")
    if len(weights) != len(states):
        raise AggregationError(f"{len(weights)} weights for {len(states)} models")
    if abs(float(np.sum(weights)) - 1.0) > WEIGHT_TOLERANCE:
        raise AggregationError(f"weights sum to {np.sum(weights)}, expected 1")
    flags = {s.is_encrypted for s in states}
    if len(flags) > 1:
        raise AggregationError("cannot aggregate a mix of encrypted and plaintext models")
    if flags.pop() != is_auth:
        raise AggregationError(f"{'authentic' if is_auth else 'synthetic'} round received the wrong message type")
    if is_auth:
        for s in states:
            if not s.mask.same_as(mask):
                raise MaskMismatchError("client message uses a different mask")
    acc = scale_masked(states[0], weights[0])
    for state, weight in zip(states[1:], weights[1:]):
        acc = add_weighted(acc, state, weight)
    return acc


def measure_sensitivity(state: ClientState, params: ModelParams, batch_size: int = 32) -> np.ndarray:
    """Mean absolute per-sample gradient over one sample batch of authentic data."""
    dataset = state.data.authentic
    if len(dataset) == 0:
        raise EmptyDatasetError(f"client {state.client_id} has no authentic samples to measure sensitivity on")
    order = np.random.default_rng(derive_seed(state.seed, "sensitivity")).permutation(len(dataset))[:batch_size]
    total = np.zeros(len(params))
    for i in order:
        _, cache = forward(state.spec, params, dataset.images[i : i + 1])
        _, grad = backward(state.spec, params, cache, dataset.labels[i : i + 1])
        total += np.abs(grad.flat)
    return total / len(order)


# --- Federation setup.


class Federation(pydantic.BaseModel):
    spec: ModelSpec
    clients: List[ClientDataset]
    test: ImageSet
    authentic_pool: ImageSet
    synthetic_pool: ImageSet

    class Config:
        arbitrary_types_allowed = True


def build_federation(config: "ExperimentConfig", seed: int) -> Federation:
    data = config.data
    if data.source == "toy":
        train = make_toy_dataset(
            data.toy_classes, data.toy_per_class, data.toy_size, derive_seed(seed, "train-data"), data.toy_channels, data.toy_noise
        )
        test = make_toy_dataset(
            data.toy_classes,
            data.toy_test_per_class,
            data.toy_size,
            derive_seed(seed, "test-data"),
            data.toy_channels,
            data.toy_noise,
            id_offset=len(train),
        )
        num_classes = data.toy_classes
    elif data.source == "cifar10":
        if not data.cifar10_dir:
            raise ConfigError("data.cifar10_dir is required for the cifar10 source")
        train, test = load_cifar10_dir(data.cifar10_dir)
        num_classes = 10
    else:
        raise ConfigError(f"unknown data source {data.source!r}")

    authentic_pool, synthetic_pool = split_authentic_synthetic(train, derive_seed(seed, "split"))
    clients = build_client_datasets(
        authentic_pool,
        synthetic_pool,
        config.federation.num_clients,
        config.federation.alpha,
        dirichlet_seed=derive_seed(seed, "dirichlet"),
        iid_seed=derive_seed(seed, "iid"),
    )
    spec = build_model_spec(
        config.model.name,
        train.image_shape,
        num_classes,
        hidden=config.model.hidden,
        activation=config.model.activation,
        kernel=config.model.kernel,
        channels=config.model.channels,
        pool=config.model.pool,
    )
    for client in clients:
        logger.debug(
            f"Client {client.client_id}: {len(client.authentic)} authentic "
            f"{client.authentic.class_counts(num_classes).tolist()}, {len(client.synthetic)} synthetic"
        )
    return Federation(spec=spec, clients=clients, test=test, authentic_pool=authentic_pool, synthetic_pool=synthetic_pool)


def run_keypair(config: "ExperimentConfig", seed: int) -> Keypair:
    return keygen(
        derive_seed(seed, "keygen"),
        SchemeParams(modulus_bits=config.crypto.modulus_bits, precision_bits=config.crypto.precision_bits),
    )


# --- Training loop.


class TrainingResult(pydantic.BaseModel):
    seed: int
    history: List[HistoryRecord]
    ledger: CostLedger
    final_model: ModelParams
    mask: EncryptionMask
    key_fingerprint: str
    converged_round: Optional[int] = None
    traces: Dict[int, RoundTrace] = {}
    snapshots: Dict[int, np.ndarray] = {}

    class Config:
        arbitrary_types_allowed = True

    @property
    def accuracies(self) -> List[float]:
        return [h.test_accuracy for h in self.history]

    @property
    def peak(self) -> Tuple[int, float]:
        """``(round, accuracy)`` of the best broadcast model."""
        best = int(np.argmax(self.accuracies))
        return self.history[best].round, self.history[best].test_accuracy


def run_training(
    config: "ExperimentConfig",
    seed: Optional[int] = None,
    on_round: Optional[Callable[[HistoryRecord, RoundRecord], None]] = None,
) -> TrainingResult:
    """
    Runs one federated training repetition.

    Stops after ``stopping.rounds`` rounds in ``fixed`` mode, or at the first
    round the convergence detector fires (at most ``stopping.max_rounds``) in
    ``convergence`` mode. Test accuracy is measured on the broadcast model by
    the harness, which decrypts with the run key outside the cost ledger.
    """
    seed = config.run.seed if seed is None else seed
    federation = build_federation(config, seed)
    spec = federation.spec
    key = run_keypair(config, seed)
    initial = init_params(spec, derive_seed(seed, "init"))

    clients = [
        ClientState(
            client_id=data.client_id,
            data=data,
            spec=spec,
            key=key,
            mask=EncryptionMask.empty(len(initial)),
            hyper=config.local,
            seed=derive_seed(seed, "client", data.client_id),
        )
        for data in federation.clients
    ]

    if config.crypto.mask_strategy == "sensitivity":
        sensitivity = np.mean([measure_sensitivity(c, initial, config.crypto.sensitivity_batch) for c in clients], axis=0)
        mask = build_mask(config.crypto.eta, len(initial), sensitivity=sensitivity)
    else:
        mask = build_mask(config.crypto.eta, len(initial), seed=derive_seed(seed, "mask"))
    for client in clients:
        client.mask = mask
    logger.info(
        f"Federation: {len(clients)} clients | Params:{len(initial)} | Encrypted:{mask.popcount} (eta={mask.eta:.3f}) | "
        f"Schedule:{config.schedule.rho_syn}/{config.schedule.rho_tot} | Key:{key.fingerprint}"
    )

    stopping = config.stopping
    max_rounds = stopping.rounds if stopping.mode == "fixed" else stopping.max_rounds
    server = ServerState(mask=mask, num_clients=len(clients))
    trace = MessageTrace(retain_rounds=config.run.trace_rounds)
    snapshot_rounds = set(config.run.snapshot_rounds)
    ledger = CostLedger()
    history: List[HistoryRecord] = []
    snapshots: Dict[int, np.ndarray] = {}
    converged = None
    broadcast = plain_model(initial)
    n = len(clients)

    with ThreadPoolExecutor(max_workers=max(1, config.run.workers)) as pool:
        for t in range(max_rounds):
            is_auth = is_authentic_round(t, config.schedule)

            # --- Downlink.
            payload = serialize_masked(broadcast)
            down_cipher = broadcast.cipher.byte_size
            for client in clients:
                trace.send(t, "down", client.client_id, payload, is_authentic=is_auth)
            costs = [ClientCosts() for _ in clients]

            def _work(i: int) -> MaskedModel:
                incoming = deserialize_masked(trace.receive("down", i).payload, key.public_key)
                return client_round(clients[i], incoming, is_auth, t, costs[i])

            if config.run.workers > 1:
                replies = list(pool.map(_work, range(n)))
            else:
                replies = [_work(i) for i in range(n)]

            # --- Uplink and aggregation.
            for i, reply in enumerate(replies):
                trace.send(t, "up", i, serialize_masked(reply), is_authentic=is_auth)
            sizes = np.array([c.samples for c in costs], dtype=np.float64)
            weights = sizes / sizes.sum()
            start = time.perf_counter()
            for i in range(n):
                server.receive(i, deserialize_masked(trace.receive("up", i).payload, key.public_key), float(weights[i]))
            broadcast = server.aggregate(is_auth)
            agg_time = time.perf_counter() - start

            record = RoundRecord(
                round=t,
                is_authentic=is_auth,
                uplink_plaintext_bytes=sum(c.uplink_plaintext_bytes for c in costs),
                uplink_ciphertext_bytes=sum(c.uplink_ciphertext_bytes for c in costs),
                broadcast_plaintext_bytes=n * (len(payload) - down_cipher),
                broadcast_ciphertext_bytes=n * down_cipher,
                enc_ops=sum(c.enc_ops for c in costs),
                dec_ops=sum(c.dec_ops for c in costs),
                samples=int(sizes.sum()),
                train_time=sum(c.train_time for c in costs),
                enc_time=sum(c.enc_time for c in costs),
                dec_time=sum(c.dec_time for c in costs),
                agg_time=agg_time,
            )
            ledger.append(record)

            # --- Evaluation (harness side).
            model = decrypt_masked(broadcast, mask, key)
            loss, accuracy = evaluate(spec, model, federation.test)
            entry = HistoryRecord(round=t, is_authentic=is_auth, test_accuracy=accuracy, test_loss=loss)
            history.append(entry)
            if t in snapshot_rounds:
                snapshots[t] = model.flat.copy()
            logger.info(
                f"Round:{t} | Auth:{is_auth} | Acc:{accuracy:.2f} | Loss:{loss:.4f} | "
                f"Enc:{record.enc_ops} | Dec:{record.dec_ops} | Cipher:{record.uplink_ciphertext_bytes / 1e3:.1f}KB"
            )
            if on_round is not None:
                on_round(entry, record)

            if stopping.mode == "convergence":
                index = detect_convergence([h.test_accuracy for h in history], stopping)
                if index is not None:
                    converged = index
                    logger.success(f"Converged at round {index} ({index + 1} rounds)")
                    break

    return TrainingResult(
        seed=seed,
        history=history,
        ledger=ledger,
        final_model=decrypt_masked(broadcast, mask, key),
        mask=mask,
        key_fingerprint=key.fingerprint,
        converged_round=converged,
        traces=trace.retained,
        snapshots=snapshots,
    )

RunOutcome.update_forward_refs(HistoryRecord=HistoryRecord, CostLedger=CostLedger)
