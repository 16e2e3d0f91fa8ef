"""Federated LoRA training: partition, local epochs, FedAvg, early stopping.

Only adapter factors (A, B per adapted projection) and scalar metrics ever
cross the client boundary. Every client builds its own model instance from
the shared (config, seed) pair, so base weights are identical by construction
and the exchanged payload stays small. Rounds are synchronous: broadcast the
global adapter state, train locally, aggregate with dataset-size weights,
evaluate on the pooled validation split, and stop early when validation loss
has not improved for `patience` rounds, restoring the best adapters.

Checkpoint format: magic "FLRA", u16 version, 32-byte config fingerprint,
u32 adapter count, then per adapter (lexicographic path order): u16 path
length, UTF-8 path, u32 rows, u32 cols and row-major little-endian float64
data for A, then the same for B.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import AugmentConfig, DatasetManifest, LabeledExample, augment
from .errors import CheckpointError, ConfigError, ProtocolError
from .losses import DistillConfig, TeacherHandle, total_loss
from .metrics import MetricsReport, evaluate
from .model import DualScaleTransformer, ModelConfig
from .optim import Adam
from .rand import substream
from .sampling import (SamplerSpec, build_sampler_from_labels, draw_batch,
                       uniform_sampler_from_labels)
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"FLRA"
CHECKPOINT_VERSION = 1


@dataclass
class LoraState:
    adapters: dict[str, tuple[np.ndarray, np.ndarray]]
    fingerprint: bytes

    def num_parameters(self) -> int:
        return sum(a.size + b.size for a, b in self.adapters.values())

    def clone(self) -> "LoraState":
        return LoraState({k: (a.copy(), b.copy()) for k, (a, b) in self.adapters.items()},
                         self.fingerprint)

    def allclose(self, other: "LoraState", tol: float = 0.0) -> bool:
        if set(self.adapters) != set(other.adapters):
            return False
        for k, (a, b) in self.adapters.items():
            oa, ob = other.adapters[k]
            if tol == 0.0:
                if not (np.array_equal(a, oa) and np.array_equal(b, ob)):
                    return False
            elif np.max(np.abs(a - oa)) > tol or np.max(np.abs(b - ob)) > tol:
                return False
        return True


@dataclass
class ClientState:
    client_id: int
    examples: list[LabeledExample]
    sampler: SamplerSpec
    model: DualScaleTransformer
    local_epochs: int

    @property
    def n_examples(self) -> int:
        return len(self.examples)


@dataclass
class RoundRecord:
    round_index: int
    client_epochs: list[list[dict]]
    client_sizes: list[int]
    val_loss: float
    val_acc: float
    bytes_exchanged: int
    is_best: bool

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "clients": [
                {"client": cid, "n": n, "epochs": epochs}
                for cid, (n, epochs) in enumerate(zip(self.client_sizes, self.client_epochs))
            ],
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
            "bytes_exchanged": self.bytes_exchanged,
            "is_best": self.is_best,
        }


@dataclass
class TrainContext:
    """Everything a client needs for one round of local training."""
    seed: int
    round_index: int
    batch_size: int
    lr: float
    weight_decay: float
    distill: DistillConfig
    teacher: TeacherHandle | None
    augment_train: AugmentConfig
    augment_eval: AugmentConfig
    val_examples: list[LabeledExample] | None = None


@dataclass
class FederationResult:
    state: LoraState
    records: list[RoundRecord]
    model: DualScaleTransformer
    best_round: int
    best_val_loss: float
    teacher: TeacherHandle | None = None


# ---------------------------------------------------------------- checkpoint

def serialize_lora(state: LoraState) -> bytes:
    if len(state.fingerprint) != 32:
        raise CheckpointError(f"fingerprint must be 32 bytes, got {len(state.fingerprint)}")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), state.fingerprint,
           struct.pack("<I", len(state.adapters))]
    for path in sorted(state.adapters):
        a, b = state.adapters[path]
        encoded = path.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        for m in (a, b):
            if m.ndim != 2:
                raise CheckpointError(f"adapter '{path}' factor must be 2-d, got {m.ndim}-d")
            out.append(struct.pack("<II", m.shape[0], m.shape[1]))
            out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_lora(blob: bytes) -> LoraState:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = bytes(take(32, "fingerprint"))
    (count,) = struct.unpack("<I", take(4, "adapter count"))
    adapters: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(count):
        (plen,) = struct.unpack("<H", take(2, "path length"))
        path = bytes(take(plen, "path")).decode("utf-8")
        factors = []
        for what in ("A", "B"):
            rows, cols = struct.unpack("<II", take(8, f"{what} shape"))
            data = take(rows * cols * 8, f"{what} data")
            factors.append(np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy())
        if path in adapters:
            raise CheckpointError(f"duplicate adapter path '{path}'")
        adapters[path] = (factors[0], factors[1])
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint payload")
    return LoraState(adapters, fingerprint)


def save_checkpoint(state: LoraState, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_lora(state))


def load_checkpoint(path: str) -> LoraState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    return deserialize_lora(blob)


def write_history(records: Sequence[RoundRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- protocol

def partition_clients(manifest: DatasetManifest, examples: Sequence[LabeledExample],
                      num_clients: int, seed: int, model_config: ModelConfig,
                      model_seed: int, local_epochs: int,
                      weighted_sampler: bool = True) -> list[ClientState]:
    """Disjoint, near-even, class-stratified partition of the train split."""
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    train = manifest.examples_for(examples, "train")
    if not train:
        raise ConfigError("train split is empty")
    by_class: dict[int, list[LabeledExample]] = {}
    for ex in train:
        by_class.setdefault(ex.class_id, []).append(ex)
    for cid, members in sorted(by_class.items()):
        if len(members) < num_clients:
            raise ConfigError(
                f"class {cid} has {len(members)} train examples for {num_clients} clients")

    assignments: list[list[LabeledExample]] = [[] for _ in range(num_clients)]
    for cid, members in sorted(by_class.items()):
        order = substream(seed, "partition", cid).permutation(len(members))
        base, extra = divmod(len(members), num_clients)
        # rotate which clients take the remainder so sizes even out globally
        sizes = [base + (1 if (k - cid) % num_clients < extra else 0)
                 for k in range(num_clients)]
        cursor = 0
        for k in range(num_clients):
            for idx in order[cursor:cursor + sizes[k]]:
                assignments[k].append(members[idx])
            cursor += sizes[k]

    make = build_sampler_from_labels if weighted_sampler else uniform_sampler_from_labels
    clients = []
    for k in range(num_clients):
        local = sorted(assignments[k], key=lambda ex: ex.source_id)
        labels = np.array([ex.class_id for ex in local], dtype=np.int64)
        sampler = make(labels, manifest.num_classes)
        model = DualScaleTransformer(model_config, model_seed)
        clients.append(ClientState(k, local, sampler, model, local_epochs))
    return clients


def _assemble_batch(client: ClientState, indices: np.ndarray, aug: AugmentConfig,
                    rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    images = []
    labels = np.empty(len(indices), dtype=np.int64)
    for slot, idx in enumerate(indices):
        ex = augment(client.examples[int(idx)], aug, rng)
        images.append(ex.image.data)
        labels[slot] = ex.class_id
    return Tensor(np.stack(images)), labels


def evaluate_model(model: DualScaleTransformer, examples: Sequence[LabeledExample],
                   aug: AugmentConfig, batch_size: int,
                   ) -> tuple[float, float, np.ndarray, np.ndarray]:
    """(mean CE loss, accuracy, softmax probabilities, labels) over examples."""
    if not examples:
        raise ConfigError("cannot evaluate on an empty example list")
    all_probs = []
    labels = np.array([ex.class_id for ex in examples], dtype=np.int64)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        images = np.stack([augment(ex, aug).image.data for ex in chunk])
        logits = model.forward(Tensor(images)).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        all_probs.append(e / e.sum(axis=1, keepdims=True))
    probs = np.concatenate(all_probs, axis=0)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(np.maximum(probs[np.arange(labels.size), labels], eps)).mean())
    acc = float((probs.argmax(axis=1) == labels).mean())
    return loss, acc, probs, labels


def local_train(client: ClientState, global_lora: LoraState, epochs: int,
                ctx: TrainContext) -> tuple[LoraState, list[dict]]:
    """One client's round: load the broadcast adapters, train, return new state."""
    model = client.model
    if global_lora.fingerprint != model.fingerprint():
        raise ProtocolError(
            f"adapter fingerprint does not match client {client.client_id}'s model config")
    model.load_lora_state(global_lora.adapters)
    model.set_lora_only_trainable()
    if epochs == 0:
        return LoraState(model.lora_state(), model.fingerprint()), []

    base_before = model.base_checksum()
    opt = Adam(model.lora_parameters(), lr=ctx.lr, weight_decay=ctx.weight_decay)
    steps = client.sampler.batches_per_epoch(ctx.batch_size)
    history: list[dict] = []
    for epoch in range(epochs):
        loss_sum = 0.0
        correct = 0
        seen = 0
        for step in range(steps):
            rng = substream(ctx.seed, "client", client.client_id, "round",
                            ctx.round_index, "epoch", epoch, "step", step)
            indices = draw_batch(client.sampler, ctx.batch_size, rng)
            images, labels = _assemble_batch(client, indices, ctx.augment_train, rng)
            teacher_logits = ctx.teacher.logits(images) if ctx.teacher is not None else None
            with Tape() as tape:
                logits = model.forward(images, train=True, rng=rng)
                loss, _ = total_loss(logits, teacher_logits, labels, ctx.distill)
                backward(loss, tape)
            opt.step()
            opt.zero_grad()
            loss_sum += loss.item() * labels.size
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += labels.size
        entry = {"epoch": epoch,
                 "train_loss": loss_sum / seen,
                 "train_acc": correct / seen}
        if ctx.val_examples:
            val_loss, val_acc, _, _ = evaluate_model(model, ctx.val_examples,
                                                     ctx.augment_eval, ctx.batch_size)
            entry["val_loss"] = val_loss
            entry["val_acc"] = val_acc
        history.append(entry)

    if model.base_checksum() != base_before:
        raise ProtocolError(f"client {client.client_id} mutated frozen base weights")
    return LoraState(model.lora_state(), model.fingerprint()), history


def fedavg(updates: Sequence[tuple[LoraState, int]]) -> LoraState:
    """Elementwise weighted mean of adapter states, weights n_c / N."""
    if not updates:
        raise ProtocolError("fedavg needs at least one update")
    sizes = [n for _, n in updates]
    if any(n <= 0 for n in sizes):
        raise ProtocolError(f"client dataset sizes must be positive, got {sizes}")
    total = sum(sizes)
    first, _ = updates[0]
    keys = set(first.adapters)
    for state, _ in updates[1:]:
        if state.fingerprint != first.fingerprint:
            raise ProtocolError("adapter fingerprints differ across clients")
        if set(state.adapters) != keys:
            diff = sorted(keys.symmetric_difference(state.adapters))
            raise ProtocolError(f"adapter key sets differ at '{diff[0]}'")

    if len(updates) == 1:
        return first.clone()
    merged: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for key in sorted(keys):
        a_sum = b_sum = None
        for state, n in updates:
            w = n / total
            a, b = state.adapters[key]
            wa, wb = w * a, w * b
            a_sum = wa if a_sum is None else a_sum + wa
            b_sum = wb if b_sum is None else b_sum + wb
        merged[key] = (a_sum, b_sum)
    return LoraState(merged, first.fingerprint)


def make_toy_teacher(examples: Sequence[LabeledExample], manifest: DatasetManifest,
                     config: ModelConfig, seed: int, epochs: int, lr: float,
                     batch_size: int, aug_train: AugmentConfig) -> TeacherHandle:
    """Train a wider/deeper full-parameter instance on the train split, freeze it."""
    model = DualScaleTransformer(config, seed)
    model.set_all_trainable()
    train = manifest.examples_for(examples, "train")
    labels = np.array([ex.class_id for ex in train], dtype=np.int64)
    sampler = build_sampler_from_labels(labels, manifest.num_classes)
    opt = Adam(model.parameters(), lr=lr)
    ce_only = DistillConfig(temperature=1.0, alpha=1.0)
    steps = sampler.batches_per_epoch(batch_size)
    holder = ClientState(-1, list(train), sampler, model, epochs)
    for epoch in range(epochs):
        for step in range(steps):
            rng = substream(seed, "teacher", "epoch", epoch, "step", step)
            indices = draw_batch(sampler, batch_size, rng)
            images, y = _assemble_batch(holder, indices, aug_train, rng)
            with Tape() as tape:
                loss, _ = total_loss(model.forward(images, train=True, rng=rng),
                                     None, y, ce_only)
                backward(loss, tape)
            opt.step()
            opt.zero_grad()
    return TeacherHandle(model, name=f"toy-teacher-e{config.embed_dim}-d{config.depth}")


def _client_count_from_env(num_clients: int) -> int:
    raw = os.environ.get("FEDSIM_THREADS", "")
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FEDSIM_THREADS must be an integer, got '{raw}'") from exc
    return max(1, min(threads, num_clients))


def run_federation(cfg, examples: Sequence[LabeledExample],
                   manifest: DatasetManifest) -> FederationResult:
    """Broadcast, local-train all clients, FedAvg, validate, early-stop.

    `cfg` is a RunConfig (see config module). Returns the best state restored.
    """
    if cfg.rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {cfg.rounds}")
    global_model = DualScaleTransformer(cfg.model, cfg.seed)

    teacher = None
    if cfg.distill.alpha < 1.0:
        teacher_cfg = replace(cfg.model, embed_dim=cfg.teacher_embed_dim,
                              depth=cfg.teacher_depth)
        teacher = make_toy_teacher(examples, manifest, teacher_cfg, cfg.seed,
                                   cfg.teacher_epochs, cfg.teacher_lr, cfg.batch_size,
                                   _train_augment(cfg, manifest))

    clients = partition_clients(manifest, examples, cfg.clients, cfg.seed,
                                cfg.model, cfg.seed, cfg.local_epochs,
                                weighted_sampler=cfg.sampler_enabled)
    val_examples = manifest.examples_for(examples, "val")
    aug_eval = AugmentConfig.evaluation(manifest, cfg.model.image_size)

    global_state = LoraState(global_model.lora_state(), global_model.fingerprint())
    per_round_bytes = 2 * len(clients) * len(serialize_lora(global_state))

    best_state = global_state.clone()
    best_loss = float("inf")
    best_round = -1
    stale = 0
    records: list[RoundRecord] = []
    workers = _client_count_from_env(len(clients))

    for t in range(cfg.rounds):
        ctx = TrainContext(seed=cfg.seed, round_index=t, batch_size=cfg.batch_size,
                           lr=cfg.lr, weight_decay=cfg.weight_decay,
                           distill=cfg.distill, teacher=teacher,
                           augment_train=_train_augment(cfg, manifest),
                           augment_eval=aug_eval, val_examples=val_examples)

        def train_one(client: ClientState):
            try:
                return local_train(client, global_state, client.local_epochs, ctx)
            except Exception as exc:
                raise ProtocolError(
                    f"client {client.client_id} failed in round {t}: {exc}") from exc

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train_one, clients))
        else:
            results = [train_one(c) for c in clients]

        global_state = fedavg([(state, client.n_examples)
                               for (state, _), client in zip(results, clients)])
        global_model.load_lora_state(global_state.adapters)
        val_loss, val_acc, _, _ = evaluate_model(global_model, val_examples,
                                                 aug_eval, cfg.batch_size)
        is_best = val_loss < best_loss
        if is_best:
            best_loss = val_loss
            best_state = global_state.clone()
            best_round = t
            stale = 0
        else:
            stale += 1
        records.append(RoundRecord(
            round_index=t,
            client_epochs=[hist for _, hist in results],
            client_sizes=[c.n_examples for c in clients],
            val_loss=val_loss,
            val_acc=val_acc,
            bytes_exchanged=per_round_bytes,
            is_best=is_best,
        ))
        if stale >= cfg.patience:
            break

    global_model.load_lora_state(best_state.adapters)
    return FederationResult(state=best_state, records=records, model=global_model,
                            best_round=best_round, best_val_loss=best_loss,
                            teacher=teacher)


def _train_augment(cfg, manifest: DatasetManifest) -> AugmentConfig:
    return AugmentConfig.training(manifest, cfg.model.image_size,
                                  flip_prob=cfg.flip_prob,
                                  rotation_degrees=cfg.rotation_degrees)


def evaluate_split(model: DualScaleTransformer, examples: Sequence[LabeledExample],
                   manifest: DatasetManifest, split: str, batch_size: int) -> MetricsReport:
    """Full metrics report over a manifest split (shared by train and eval paths)."""
    chosen = manifest.examples_for(examples, split)
    if not chosen:
        raise ConfigError(f"split '{split}' is empty")
    aug = AugmentConfig.evaluation(manifest, model.config.image_size)
    _, _, probs, labels = evaluate_model(model, chosen, aug, batch_size)
    return evaluate(probs, labels)
