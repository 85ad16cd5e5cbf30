"""Memory state and per-token controller: entity probability, cell similarity,
coref/new-entity distribution, overwrite selection (hard at inference, Gumbel-
Softmax relaxation at training), and the content/usage updates.

Three memory layouts are supported:
    vanilla      - cells start as (zero vector, usage 0); no per-cell params
    learned_init - cell contents start at learned vectors
    fixed_key    - first key_dim entries of each cell are learned and immutable;
                   only the value slice is updated
"""

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .encoder import GRUEncoder, init_uniform_, sample_dropout_mask

VARIANTS = ("vanilla", "learned_init", "fixed_key")

# Finite stand-in for the -inf mask on never-used cells: softmax mass under
# exp(-1e4) underflows to exact zero in both float32 and float64, and masked
# cells get exactly-zero gradient instead of NaN.
SENTINEL = 1.0e4

GUMBEL_EPS = 1.0e-10


@dataclass
class MemoryConfig:
    num_cells: int = 8
    hidden_dim: int = 300
    variant: str = "vanilla"
    key_dim: int = 20
    decay: float = 0.98
    coref_usage_threshold: float = 0.0
    mlp_hidden_dim: int = 300
    update_mlp_hidden_layers: int = 0  # depth of the coref-update MLP

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown memory variant {self.variant!r}")
        if self.num_cells < 1:
            raise ValueError("num_cells must be >= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        if self.variant == "fixed_key" and not 0 < self.key_dim < self.hidden_dim:
            raise ValueError("fixed_key needs 0 < key_dim < hidden_dim")

    @property
    def value_dim(self):
        return self.hidden_dim - self.key_dim


@dataclass
class MemoryState:
    contents: torch.Tensor  # (N, H)
    usage: torch.Tensor     # (N,)


@dataclass
class StepTrace:
    entity_prob: torch.Tensor      # scalar e_t
    similarity: torch.Tensor       # (N,) raw similarity scores
    coref_scores: torch.Tensor     # (N,) masked scores
    coref: torch.Tensor            # (N,) c_t
    overwrite: torch.Tensor        # (N,) o_t
    new_entity: torch.Tensor       # scalar n_t
    usage: torch.Tensor            # (N,) post-step usage


def _mlp(dims, generator=None):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Controller(nn.Module):
    """Holds the three MLPs and any variant-specific cell parameters."""

    def __init__(self, config: MemoryConfig):
        super().__init__()
        self.config = config
        H, hid = config.hidden_dim, config.mlp_hidden_dim
        self.mention_mlp = _mlp([H, hid, hid, 1])
        self.similarity_mlp = _mlp([3 * H + 1, hid, hid, 1])
        update_dims = [2 * H] + [hid] * config.update_mlp_hidden_layers + [H]
        self.update_mlp = _mlp(update_dims)
        if config.variant == "learned_init":
            self.init_vectors = nn.Parameter(torch.zeros(config.num_cells, H))
        elif config.variant == "fixed_key":
            self.keys = nn.Parameter(torch.zeros(config.num_cells, config.key_dim))

    def reset_parameters(self, generator=None):
        for module in (self.mention_mlp, self.similarity_mlp, self.update_mlp):
            for layer in module:
                if isinstance(layer, nn.Linear):
                    init_uniform_(layer.weight, layer.in_features, generator)
                    init_uniform_(layer.bias, layer.in_features, generator)
        if self.config.variant == "learned_init":
            init_uniform_(self.init_vectors, self.config.hidden_dim, generator)
        elif self.config.variant == "fixed_key":
            init_uniform_(self.keys, self.config.key_dim, generator)


def init_memory(config, controller, dtype=torch.float32):
    N, H = config.num_cells, config.hidden_dim
    usage = torch.zeros(N, dtype=dtype)
    if config.variant == "vanilla":
        contents = torch.zeros(N, H, dtype=dtype)
    elif config.variant == "learned_init":
        contents = controller.init_vectors.to(dtype)
    else:  # fixed_key: key slice learned, value slice zero
        contents = torch.zeros(N, H, dtype=dtype)
        contents = torch.cat(
            [controller.keys.to(dtype), contents[:, config.key_dim:]], dim=1)
    return MemoryState(contents=contents, usage=usage)


def entity_probability(controller, h):
    return torch.sigmoid(controller.mention_mlp(h).squeeze(-1))


def similarity(controller, h, contents, usage):
    """Per-cell similarity score: MLP over [h ; m ; h*m ; u]."""
    N = contents.shape[0]
    h_rep = h.unsqueeze(0).expand(N, -1)
    feats = torch.cat(
        [h_rep, contents, h_rep * contents, usage.unsqueeze(1)], dim=1)
    return controller.similarity_mlp(feats).squeeze(-1)


def coref_scores(sims, usage_prev, usage_threshold=0.0):
    """Mask cells never used (or below the recency threshold) with a large
    negative offset so they get exactly zero softmax mass."""
    masked = usage_prev <= usage_threshold
    return sims - SENTINEL * masked.to(sims.dtype)


def operation_distribution(e, cs):
    """Split entity mass across per-cell coref and the new-entity slot.

    The new-entity logit is fixed at 0 (only relative values matter).
    Returns (coref (N,), new_entity scalar); their sum equals e.
    """
    logits = torch.cat([cs, cs.new_zeros(1)])
    probs = e * torch.softmax(logits, dim=0)
    return probs[:-1], probs[-1]


def overwrite_infer(n, usage_prev, sims, variant, tie_noise):
    """Hard overwrite: all new-entity mass to the least-used cell.

    Ties among minimal-usage cells: uniform random (vanilla, driven by the
    tie_noise uniform draw) or highest similarity (learned_init / fixed_key,
    where the initial cell vectors make similarity meaningful for empty cells).
    """
    tied = (usage_prev == usage_prev.min()).nonzero(as_tuple=True)[0]
    if len(tied) == 1:
        pick = tied[0]
    elif variant == "vanilla":
        draw = 0.0 if tie_noise is None else float(tie_noise)
        pick = tied[min(int(draw * len(tied)), len(tied) - 1)]
    else:
        pick = tied[int(torch.argmax(sims[tied]))]
    o = torch.zeros_like(usage_prev)
    o[pick] = n
    return o


def overwrite_train(n, usage_prev, tau, gumbel_noise):
    """Gumbel-Softmax relaxation over (1 - usage) logits; sums to n exactly."""
    if tau <= 0:
        raise ValueError("Gumbel-Softmax temperature must be > 0")
    logits = (1.0 - usage_prev + gumbel_noise) / tau
    return n * torch.softmax(logits, dim=0)


def sample_gumbel(shape, generator, dtype=torch.float32):
    u = torch.rand(*shape, generator=generator, dtype=dtype)
    u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -torch.log(-torch.log(u))


def memory_step(state, h, controller, config, mode, tau=1.0,
                gumbel_noise=None, tie_noise=None, entity_prob_val=None):
    """One controller + memory update step; returns (new state, trace).

    entity_prob_val lets callers batch the mention MLP over all tokens up
    front (it depends only on h_t); left as None it is computed here.
    """
    e = (entity_probability(controller, h) if entity_prob_val is None
         else entity_prob_val)
    sims = similarity(controller, h, state.contents, state.usage)
    cs = coref_scores(sims, state.usage, config.coref_usage_threshold)
    c, n = operation_distribution(e, cs)
    if mode == "train":
        o = overwrite_train(n, state.usage, tau, gumbel_noise)
    elif mode == "infer":
        o = overwrite_infer(n, state.usage, sims, config.variant, tie_noise)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    N = config.num_cells
    h_rep = h.unsqueeze(0).expand(N, -1)
    merged = controller.update_mlp(torch.cat([h_rep, state.contents], dim=1))
    gate = (o + c).unsqueeze(1)
    new_contents = ((1.0 - gate) * state.contents
                    + o.unsqueeze(1) * h_rep
                    + c.unsqueeze(1) * merged)
    if config.variant == "fixed_key":
        # Key slice is immutable for the whole document read.
        new_contents = torch.cat(
            [state.contents[:, :config.key_dim],
             new_contents[:, config.key_dim:]], dim=1)
    new_usage = torch.clamp(o + c + config.decay * state.usage, max=1.0)
    trace = StepTrace(entity_prob=e, similarity=sims, coref_scores=cs,
                      coref=c, overwrite=o, new_entity=n, usage=new_usage)
    return MemoryState(contents=new_contents, usage=new_usage), trace


# ---------------------------------------------------------------------------
# Unrolled fast path
#
# memory_step above is the reference semantics; the loop below is the same
# computation with the token-independent projections hoisted out of the
# recurrence (a per-token equivalence test guards against drift).


def _unroll(e_all: torch.Tensor, sim_h: torch.Tensor, upd_h: torch.Tensor,
            hidden: torch.Tensor, contents: torch.Tensor, usage: torch.Tensor,
            s_wm: torch.Tensor, s_whm: torch.Tensor, s_wu: torch.Tensor,
            s_w2: torch.Tensor, s_b2: torch.Tensor,
            s_w3: torch.Tensor, s_b3: torch.Tensor,
            u_wm: torch.Tensor,
            u_weights: list[torch.Tensor], u_biases: list[torch.Tensor],
            gumbel: torch.Tensor, tie: torch.Tensor,
            train_mode: bool, tie_by_sim: bool,
            tau: float, decay: float, threshold: float, sentinel: float,
            key_dim: int):
    T = hidden.shape[0]
    sims_l: list[torch.Tensor] = []
    cs_l: list[torch.Tensor] = []
    coref_l: list[torch.Tensor] = []
    over_l: list[torch.Tensor] = []
    new_l: list[torch.Tensor] = []
    usage_l: list[torch.Tensor] = []
    s_wm_t, s_whm_t = s_wm.t(), s_whm.t()
    u_wm_t = u_wm.t()
    for t in range(T):
        h = hidden[t]
        # similarity MLP; its first layer is split into the precomputed
        # h-projection plus the memory-dependent parts
        x = (sim_h[t] + contents @ s_wm_t + (h * contents) @ s_whm_t
             + usage.unsqueeze(1) * s_wu)
        x = torch.relu(x)
        x = torch.relu(x @ s_w2.t() + s_b2)
        sims = (x @ s_w3.t() + s_b3).squeeze(-1)
        cs = sims - sentinel * (usage <= threshold).to(sims.dtype)
        probs = e_all[t] * torch.softmax(
            torch.cat([cs, cs.new_zeros(1)]), dim=0)
        c = probs[:-1]
        n = probs[-1]
        if train_mode:
            o = n * torch.softmax((1.0 - usage + gumbel[t]) / tau, dim=0)
        else:
            tied = (usage == usage.min()).nonzero().view(-1)
            if tied.numel() == 1:
                pick = tied[0]
            elif tie_by_sim:
                pick = tied[torch.argmax(sims[tied])]
            else:
                k = int(tie[t] * float(tied.numel()))
                if k >= tied.numel():
                    k = tied.numel() - 1
                pick = tied[k]
            o = torch.zeros_like(usage)
            o[pick] = n
        # coref update MLP, h-projection of the first layer precomputed
        m = upd_h[t] + contents @ u_wm_t
        for i in range(len(u_weights)):
            m = torch.relu(m) @ u_weights[i].t() + u_biases[i]
        oc = o + c
        new_contents = ((1.0 - oc.unsqueeze(1)) * contents
                        + o.unsqueeze(1) * h.unsqueeze(0)
                        + c.unsqueeze(1) * m)
        if key_dim > 0:
            new_contents = torch.cat(
                [contents[:, :key_dim], new_contents[:, key_dim:]], dim=1)
        usage = torch.clamp(oc + decay * usage, max=1.0)
        contents = new_contents
        sims_l.append(sims)
        cs_l.append(cs)
        coref_l.append(c)
        over_l.append(o)
        new_l.append(n)
        usage_l.append(usage)
    return (torch.stack(sims_l), torch.stack(cs_l), torch.stack(coref_l),
            torch.stack(over_l), torch.stack(new_l), torch.stack(usage_l))


def _unroll_train_batch(e_all, sim_h, upd_h, hidden, contents, usage,
                        s_wm, s_whm, s_wu, s_w2, s_b2, s_w3, s_b3,
                        u_wm, u_weights, u_biases, gumbel,
                        tau, decay, threshold, sentinel, key_dim):
    """Train-mode _unroll over a batch of documents at once.

    Shapes gain a leading batch dimension: hidden (B, T, H), contents
    (B, N, H), usage (B, N), gumbel (B, T, N).  The recurrence is causal, so
    right-padding shorter documents cannot change their real prefix; callers
    slice each document's trace back to its own length.
    """
    B, T = hidden.shape[0], hidden.shape[1]
    sims_l, cs_l, coref_l, over_l, new_l, usage_l = [], [], [], [], [], []
    s_wm_t, s_whm_t = s_wm.t(), s_whm.t()
    s_w2_t, s_w3_t = s_w2.t(), s_w3.t()
    u_wm_t = u_wm.t()
    for t in range(T):
        h = hidden[:, t]                                      # (B, H)
        x = (sim_h[:, t].unsqueeze(1) + contents @ s_wm_t
             + (h.unsqueeze(1) * contents) @ s_whm_t
             + usage.unsqueeze(-1) * s_wu)                    # (B, N, hid)
        x = torch.relu(x)
        x = torch.relu(x @ s_w2_t + s_b2)
        sims = (x @ s_w3_t + s_b3).squeeze(-1)                # (B, N)
        cs = sims - sentinel * (usage <= threshold).to(sims.dtype)
        logits = torch.cat([cs, cs.new_zeros(B, 1)], dim=1)
        probs = e_all[:, t].unsqueeze(1) * torch.softmax(logits, dim=1)
        c = probs[:, :-1]                                     # (B, N)
        n = probs[:, -1]                                      # (B,)
        o = n.unsqueeze(1) * torch.softmax(
            (1.0 - usage + gumbel[:, t]) / tau, dim=1)
        m = upd_h[:, t].unsqueeze(1) + contents @ u_wm_t
        for i in range(len(u_weights)):
            m = torch.relu(m) @ u_weights[i].t() + u_biases[i]
        oc = o + c
        new_contents = ((1.0 - oc.unsqueeze(-1)) * contents
                        + o.unsqueeze(-1) * h.unsqueeze(1)
                        + c.unsqueeze(-1) * m)
        if key_dim > 0:
            new_contents = torch.cat(
                [contents[..., :key_dim], new_contents[..., key_dim:]], dim=2)
        usage = torch.clamp(oc + decay * usage, max=1.0)
        contents = new_contents
        sims_l.append(sims)
        cs_l.append(cs)
        coref_l.append(c)
        over_l.append(o)
        new_l.append(n)
        usage_l.append(usage)
    return (torch.stack(sims_l, dim=1), torch.stack(cs_l, dim=1),
            torch.stack(coref_l, dim=1), torch.stack(over_l, dim=1),
            torch.stack(new_l, dim=1), torch.stack(usage_l, dim=1))


# ---------------------------------------------------------------------------
# Full model


@dataclass
class ForwardNoise:
    """Pre-drawn stochastic inputs so a forward pass can be replayed exactly
    (finite-difference checks perturb parameters while holding these fixed)."""
    dropout_mask: Optional[torch.Tensor] = None  # (T, H) or None
    gumbel: Optional[torch.Tensor] = None        # (T, N) train mode
    tie: Optional[torch.Tensor] = None           # (T,) uniform, infer mode


@dataclass
class Trace:
    """Stacked per-token controller outputs for one document."""
    entity_prob: torch.Tensor   # (T,)
    similarity: torch.Tensor    # (T, N)
    coref: torch.Tensor         # (T, N)
    overwrite: torch.Tensor     # (T, N)
    new_entity: torch.Tensor    # (T,)
    usage: torch.Tensor         # (T, N)


class EntityTracker(nn.Module):
    """GRU encoder + memory controller, unrolled over a document."""

    def __init__(self, input_dim, config: MemoryConfig, dropout=0.5):
        super().__init__()
        self.config = config
        self.encoder = GRUEncoder(input_dim, config.hidden_dim, dropout=dropout)
        self.controller = Controller(config)

    def reset_parameters(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.encoder.reset_parameters(g)
        self.controller.reset_parameters(g)
        return self

    def sample_noise(self, num_tokens, mode, generator, dtype=torch.float32):
        mask = None
        if mode == "train" and self.encoder.dropout > 0:
            mask = sample_dropout_mask(num_tokens, self.config.hidden_dim,
                                       self.encoder.dropout, generator, dtype)
        if mode == "train":
            return ForwardNoise(
                dropout_mask=mask,
                gumbel=sample_gumbel((num_tokens, self.config.num_cells),
                                     generator, dtype))
        return ForwardNoise(
            tie=torch.rand(num_tokens, generator=generator, dtype=dtype))

    def forward(self, embeddings, mode="infer", tau=1.0, noise=None):
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "train" and tau <= 0:
            raise ValueError("Gumbel-Softmax temperature must be > 0")
        T = embeddings.shape[0]
        if noise is None:
            noise = ForwardNoise()
        hidden = self.encoder(embeddings, dropout_mask=noise.dropout_mask)
        dtype = embeddings.dtype
        state = init_memory(self.config, self.controller, dtype=dtype)
        entity_probs = entity_probability(self.controller, hidden)  # (T,)

        config = self.config
        H = config.hidden_dim
        sim_l1, _, sim_l2, _, sim_l3 = self.controller.similarity_mlp
        upd_layers = [m for m in self.controller.update_mlp
                      if isinstance(m, nn.Linear)]
        gumbel = noise.gumbel
        tie = noise.tie
        if mode == "train" and gumbel is None:
            gumbel = hidden.new_zeros(T, config.num_cells)
        if tie is None:
            tie = hidden.new_zeros(T)
        sims, cs, coref, over, new, usage = _unroll(
            entity_probs,
            hidden @ sim_l1.weight[:, :H].t() + sim_l1.bias,
            hidden @ upd_layers[0].weight[:, :H].t() + upd_layers[0].bias,
            hidden, state.contents, state.usage,
            sim_l1.weight[:, H:2 * H], sim_l1.weight[:, 2 * H:3 * H],
            sim_l1.weight[:, 3 * H], sim_l2.weight, sim_l2.bias,
            sim_l3.weight, sim_l3.bias,
            upd_layers[0].weight[:, H:],
            [m.weight for m in upd_layers[1:]],
            [m.bias for m in upd_layers[1:]],
            gumbel, tie,
            mode == "train", config.variant != "vanilla",
            tau, config.decay, config.coref_usage_threshold, SENTINEL,
            config.key_dim if config.variant == "fixed_key" else 0)
        return Trace(entity_prob=entity_probs, similarity=sims, coref=coref,
                     overwrite=over, new_entity=new, usage=usage)

    def forward_batch(self, embeddings, tau=1.0, gumbel=None,
                      dropout_mask=None):
        """Train-mode forward over right-padded documents (B, T, D).

        Per-document noise keeps the same shapes as the single-document path
        (gumbel (B, T, N), dropout_mask (B, T, H)); pad positions are inert
        because the recurrence is causal — slice trace[i, :T_i] per document.
        Returns a Trace whose tensors carry a leading batch dimension.
        """
        if tau <= 0:
            raise ValueError("Gumbel-Softmax temperature must be > 0")
        B, T = embeddings.shape[0], embeddings.shape[1]
        hidden = self.encoder.forward_batch(embeddings,
                                            dropout_mask=dropout_mask)
        dtype = embeddings.dtype
        state = init_memory(self.config, self.controller, dtype=dtype)
        contents = state.contents.unsqueeze(0).expand(B, -1, -1)
        usage = state.usage.unsqueeze(0).expand(B, -1)
        entity_probs = entity_probability(self.controller, hidden)  # (B, T)

        config = self.config
        H = config.hidden_dim
        sim_l1, _, sim_l2, _, sim_l3 = self.controller.similarity_mlp
        upd_layers = [m for m in self.controller.update_mlp
                      if isinstance(m, nn.Linear)]
        if gumbel is None:
            gumbel = hidden.new_zeros(B, T, config.num_cells)
        sims, cs, coref, over, new, usage = _unroll_train_batch(
            entity_probs,
            hidden @ sim_l1.weight[:, :H].t() + sim_l1.bias,
            hidden @ upd_layers[0].weight[:, :H].t() + upd_layers[0].bias,
            hidden, contents, usage,
            sim_l1.weight[:, H:2 * H], sim_l1.weight[:, 2 * H:3 * H],
            sim_l1.weight[:, 3 * H], sim_l2.weight, sim_l2.bias,
            sim_l3.weight, sim_l3.bias,
            upd_layers[0].weight[:, H:],
            [m.weight for m in upd_layers[1:]],
            [m.bias for m in upd_layers[1:]],
            gumbel,
            tau, config.decay, config.coref_usage_threshold, SENTINEL,
            config.key_dim if config.variant == "fixed_key" else 0)
        return Trace(entity_prob=entity_probs, similarity=sims, coref=coref,
                     overwrite=over, new_entity=new, usage=usage)


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def step_flop_estimate(config, input_dim):
    """Analytic multiply-accumulate count for one token step (encoder + all
    controller work); linear in the number of cells by construction."""
    H, N, hid = config.hidden_dim, config.num_cells, config.mlp_hidden_dim
    gru = 3 * (input_dim * H + H * H + H)
    mention = H * hid + hid * hid + hid
    sim = N * ((3 * H + 1) * hid + hid * hid + hid)
    update = N * (2 * H * H)
    softmax = 3 * (N + 1)
    state_update = 6 * N * H + 4 * N
    return gru + mention + sim + update + softmax + state_update
