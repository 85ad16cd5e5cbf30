"""Training loop and verification harness: Adam with plateau-halved learning
rate, Gumbel temperature annealing, early stopping, versioned binary
checkpoints, and a central-finite-difference gradient check.

All stochastic draws are derived from (seed, epoch, index) so a loaded
checkpoint resumes on the identical trajectory without opaque RNG state.
"""

import copy
import json
import random
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import memory, objective
from .evaluation import sweep_threshold_f1
from .link import TraceMatrix, span_link_probability
from .memory import EntityTracker, MemoryConfig

CHECKPOINT_MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 100
    lr: float = 1.0e-3
    lr_min: float = 1.0e-4
    lr_patience: int = 5
    stop_patience: int = 15
    tau0: float = 1.0
    tau_halve_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1.0e-8
    lam: float = objective.DEFAULT_LAMBDA
    self_link_weight: float = 1.0
    positive_weight: float = 5.0
    negative_weight: float = 50.0
    seed: int = 0
    batch_size: int = 1  # documents per optimizer step (1 = plain SGD order)
    target_f1: Optional[float] = None  # optional early exit once reached
    improvement_eps: float = 1.0e-6

    def __post_init__(self):
        if self.lr_min > self.lr:
            raise ValueError("lr_min must be <= lr")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def loss_weights(self):
        return {objective.SELF_LINK: self.self_link_weight,
                objective.POSITIVE: self.positive_weight,
                objective.NEGATIVE: self.negative_weight}

    def tau_at(self, epoch):
        return self.tau0 * 0.5 ** (epoch // self.tau_halve_every)


@dataclass
class TrainResult:
    best_state: dict
    best_f1: float
    best_epoch: int
    best_threshold: float
    history: list  # rows of (epoch, train_loss, val_f1, lr, tau)
    stopped_epoch: int


def derive_seed(*parts):
    """Stable 32-bit seed from arbitrary labeled parts."""
    return zlib.crc32(":".join(str(p) for p in parts).encode("utf-8"))


# ---------------------------------------------------------------------------
# Validation scoring


def instance_scores(model, instance, seed):
    """Span-level link probabilities for the (A, P) and (B, P) pairs,
    computed in inference mode (hard overwrites, no dropout)."""
    with torch.no_grad():
        emb = torch.from_numpy(np.ascontiguousarray(instance.doc.embeddings))
        g = torch.Generator().manual_seed(seed)
        noise = model.sample_noise(instance.doc.num_tokens, "infer", g)
        trace = model(emb, mode="infer", noise=noise)
    tm = TraceMatrix.from_trace(trace)
    return (span_link_probability(tm, instance.span_a, instance.span_p),
            span_link_probability(tm, instance.span_b, instance.span_p),
            trace)


def evaluate_f1(model, instances, seed):
    """Threshold-swept micro F1 over all (name, pronoun) decisions."""
    scores, labels = [], []
    for idx, inst in enumerate(instances):
        s_a, s_b, _ = instance_scores(model, inst, derive_seed(seed, "val", idx))
        scores.extend([s_a, s_b])
        labels.extend([inst.label_a, inst.label_b])
    return sweep_threshold_f1(scores, labels), scores, labels


# ---------------------------------------------------------------------------
# Checkpoints (PTCK container)


def _named_tensors(model, optimizer, best_state):
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"model.{name}"] = p.detach()
    if best_state is not None:
        for name, t in best_state.items():
            tensors[f"best.{name}"] = t
    if optimizer is not None:
        params = list(model.parameters())
        names = [name for name, _ in model.named_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if state:
                tensors[f"adam.{name}.exp_avg"] = state["exp_avg"]
                tensors[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return tensors


def _adam_steps(model, optimizer):
    steps = {}
    if optimizer is None:
        return steps
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            steps[name] = int(state["step"])
    return steps


def save_checkpoint(path, model, optimizer, meta, best_state=None):
    tensors = _named_tensors(model, optimizer, best_state)
    meta = dict(meta)
    meta["adam_steps"] = _adam_steps(model, optimizer)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            data = np.ascontiguousarray(
                tensors[name].detach().cpu().numpy(), dtype="<f4")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(
            data[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    (blob_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + blob_len].decode("utf-8"))
    return tensors, meta


def build_model(input_dim, memory_config, dropout=0.5, init_seed=0):
    model = EntityTracker(input_dim, memory_config, dropout=dropout)
    model.reset_parameters(seed=init_seed)
    return model


def model_from_checkpoint(path, use_best=False):
    tensors, meta = load_checkpoint(path)
    config = MemoryConfig(**meta["memory_config"])
    model = EntityTracker(meta["input_dim"], config, dropout=meta["dropout"])
    prefix = "best." if use_best and any(
        k.startswith("best.") for k in tensors) else "model."
    state = {k[len(prefix):]: torch.from_numpy(v)
             for k, v in tensors.items() if k.startswith(prefix)}
    model.load_state_dict(state)
    return model, meta


def _restore_optimizer(optimizer, model, tensors, meta):
    for name, p in model.named_parameters():
        key = f"adam.{name}.exp_avg"
        if key in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(meta["adam_steps"][name])),
                "exp_avg": torch.from_numpy(tensors[key].copy()),
                "exp_avg_sq": torch.from_numpy(
                    tensors[f"adam.{name}.exp_avg_sq"].copy()),
            }


# ---------------------------------------------------------------------------
# Training


def _train_one_doc(model, instance, config, tau, gen, pairs=None):
    emb = torch.from_numpy(np.ascontiguousarray(instance.doc.embeddings))
    noise = model.sample_noise(instance.doc.num_tokens, "train", gen)
    trace = model(emb, mode="train", tau=tau, noise=noise)
    loss = objective.total_loss(instance, trace, lam=config.lam,
                                weights=config.loss_weights, pairs=pairs)
    return loss.total


def _doc_trace(trace, i, num_tokens):
    """Slice one document's trace out of a batched Trace."""
    return memory.Trace(
        entity_prob=trace.entity_prob[i, :num_tokens],
        similarity=trace.similarity[i, :num_tokens],
        coref=trace.coref[i, :num_tokens],
        overwrite=trace.overwrite[i, :num_tokens],
        new_entity=trace.new_entity[i, :num_tokens],
        usage=trace.usage[i, :num_tokens])


def _train_one_batch(model, instances, config, tau, epoch, indices,
                     pair_sets=None):
    """One optimizer step over several documents, right-padded to a common
    length.  Per-document noise is drawn exactly as in the batch_size=1 path
    (seeded by the document's corpus index), so batching changes only how
    gradients are grouped, not which noise a document sees."""
    B = len(instances)
    T = max(inst.doc.num_tokens for inst in instances)
    N, H = model.config.num_cells, model.config.hidden_dim
    first = torch.from_numpy(np.ascontiguousarray(instances[0].doc.embeddings))
    emb = first.new_zeros(B, T, first.shape[1])
    gumbel = first.new_zeros(B, T, N)
    dropout = first.new_ones(B, T, H) if model.encoder.dropout > 0 else None
    for i, (inst, idx) in enumerate(zip(instances, indices)):
        Ti = inst.doc.num_tokens
        emb[i, :Ti] = torch.from_numpy(np.ascontiguousarray(inst.doc.embeddings))
        gen = torch.Generator().manual_seed(
            derive_seed(config.seed, "doc", epoch, idx))
        noise = model.sample_noise(Ti, "train", gen)
        gumbel[i, :Ti] = noise.gumbel
        if dropout is not None:
            dropout[i, :Ti] = noise.dropout_mask
    trace = model.forward_batch(emb, tau=tau, gumbel=gumbel,
                                dropout_mask=dropout)
    losses = [objective.total_loss(
        inst, _doc_trace(trace, i, inst.doc.num_tokens),
        lam=config.lam, weights=config.loss_weights,
        pairs=pair_sets[i] if pair_sets is not None else None).total
        for i, inst in enumerate(instances)]
    return torch.stack(losses)


def train(model, train_set, val_set, config, checkpoint_path=None,
          history_path=None, resume=None):
    """Run the full schedule; returns the best-validation result.

    With resume=<checkpoint path>, continues a previous run on the identical
    trajectory (parameters, Adam moments, schedules all restored).
    """
    if not train_set:
        raise TrainingError("training corpus is empty")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2),
                                 eps=config.adam_eps)
    start_epoch = 0
    lr = config.lr
    best_f1, best_epoch, best_threshold = -1.0, -1, 0.0
    epochs_since_improve = 0
    best_state = None
    history = []

    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        state = {k[len("model."):]: torch.from_numpy(v)
                 for k, v in tensors.items() if k.startswith("model.")}
        model.load_state_dict(state)
        _restore_optimizer(optimizer, model, tensors, meta)
        start_epoch = meta["epoch"] + 1
        lr = meta["lr"]
        best_f1 = meta["best_f1"]
        best_epoch = meta["best_epoch"]
        best_threshold = meta["best_threshold"]
        epochs_since_improve = meta["epochs_since_improve"]
        best_state = {k[len("best."):]: torch.from_numpy(v)
                      for k, v in tensors.items() if k.startswith("best.")}
        history = [tuple(row) for row in meta["history"]]

    pair_sets = [objective.pair_set(inst, config.loss_weights)
                 for inst in train_set]
    stopped_epoch = start_epoch - 1
    for epoch in range(start_epoch, config.max_epochs):
        stopped_epoch = epoch
        tau = config.tau_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = list(range(len(train_set)))
        random.Random(f"{config.seed}:shuffle:{epoch}").shuffle(order)
        total_loss_val = 0.0
        if config.batch_size == 1:
            for idx in order:
                gen = torch.Generator().manual_seed(
                    derive_seed(config.seed, "doc", epoch, idx))
                loss = _train_one_doc(model, train_set[idx], config, tau, gen,
                                      pairs=pair_sets[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, document "
                        f"{train_set[idx].doc.doc_id!r}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss_val += float(loss.detach())
        else:
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                losses = _train_one_batch(
                    model, [train_set[i] for i in chunk], config, tau,
                    epoch, chunk, pair_sets=[pair_sets[i] for i in chunk])
                if not torch.all(torch.isfinite(losses)):
                    bad = chunk[int(torch.isfinite(losses).logical_not()
                                    .nonzero()[0])]
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, document "
                        f"{train_set[bad].doc.doc_id!r}")
                optimizer.zero_grad()
                losses.mean().backward()
                optimizer.step()
                total_loss_val += float(losses.detach().sum())

        sweep, _, _ = evaluate_f1(model, val_set, config.seed)
        val_f1 = sweep.best_value
        history.append((epoch, total_loss_val / len(train_set), val_f1, lr, tau))

        if val_f1 > best_f1 + config.improvement_eps:
            best_f1, best_epoch = val_f1, epoch
            best_threshold = sweep.best_threshold
            best_state = {name: p.detach().clone()
                          for name, p in model.named_parameters()}
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1

        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer, {
                "epoch": epoch, "lr": lr, "tau": tau,
                "best_f1": best_f1, "best_epoch": best_epoch,
                "best_threshold": best_threshold,
                "epochs_since_improve": epochs_since_improve,
                "seed": config.seed,
                "input_dim": model.encoder.input_dim,
                "dropout": model.encoder.dropout,
                "memory_config": asdict(model.config),
                "history": [list(row) for row in history],
            }, best_state=best_state)
        if history_path is not None:
            write_history(history, history_path)

        if epochs_since_improve >= config.stop_patience:
            break
        if config.target_f1 is not None and best_f1 >= config.target_f1:
            break
        if epochs_since_improve > 0 and epochs_since_improve % config.lr_patience == 0:
            lr = max(lr / 2.0, config.lr_min)

    if best_state is None:
        best_state = {name: p.detach().clone()
                      for name, p in model.named_parameters()}
    return TrainResult(best_state=best_state, best_f1=best_f1,
                       best_epoch=best_epoch, best_threshold=best_threshold,
                       history=history, stopped_epoch=stopped_epoch)


def write_history(history, path):
    lines = ["epoch,train_loss,val_f1,lr,tau"]
    for epoch, loss, f1, lr, tau in history:
        lines.append(f"{epoch},{loss!r},{f1!r},{lr!r},{tau!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def grad_check(model, instance, tolerance=1.0e-4, tau=1.0, lam=0.1,
               seed=0, step=1.0e-5):
    """Compare reverse-mode gradients of the training loss against central
    finite differences, holding dropout masks and Gumbel draws fixed.

    The model is evaluated in float64; intended for tiny configurations.
    """
    model = copy.deepcopy(model).double()
    emb = torch.from_numpy(
        np.ascontiguousarray(instance.doc.embeddings, dtype=np.float64))
    gen = torch.Generator().manual_seed(seed)
    noise = model.sample_noise(instance.doc.num_tokens, "train", gen,
                               dtype=torch.float64)

    def loss_value():
        trace = model(emb, mode="train", tau=tau, noise=noise)
        return objective.total_loss(instance, trace, lam=lam).total

    model.zero_grad()
    loss_value().backward()
    analytic = {name: p.grad.detach().clone()
                for name, p in model.named_parameters()}

    per_tensor = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            nflat = numeric.view(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + step
                plus = float(loss_value())
                flat[k] = orig - step
                minus = float(loss_value())
                flat[k] = orig
                nflat[k] = (plus - minus) / (2.0 * step)
            a = analytic[name]
            scale = max(float(a.abs().max()), float(numeric.abs().max()), 1.0e-6)
            per_tensor[name] = float((a - numeric).abs().max()) / scale
    max_rel = max(per_tensor.values())
    return GradCheckReport(max_rel_error=max_rel, per_tensor=per_tensor,
                           tolerance=tolerance)
