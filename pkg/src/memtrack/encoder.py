"""Single-layer unidirectional GRU over frozen embedding rows.

Gate convention (fixed for test vectors):
    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    hcand_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * hcand_t
Initial hidden state is zero.  Dropout (inverted scaling, one mask per token
position) is applied to the outputs during training only.
"""

import math

import torch
from torch import nn


def init_uniform_(tensor, fan, generator):
    bound = 1.0 / math.sqrt(fan)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class GRUEncoder(nn.Module):
    def __init__(self, input_dim, hidden_dim, dropout=0.5):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate {dropout} outside [0, 1)")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        H = hidden_dim
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", nn.Parameter(torch.empty(H, input_dim)))
            setattr(self, f"u_{gate}", nn.Parameter(torch.empty(H, H)))
            setattr(self, f"b_{gate}", nn.Parameter(torch.empty(H)))
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        for p in self.parameters():
            init_uniform_(p, self.hidden_dim, generator)

    def step(self, x, h):
        z = torch.sigmoid(self.w_z @ x + self.u_z @ h + self.b_z)
        r = torch.sigmoid(self.w_r @ x + self.u_r @ h + self.b_r)
        cand = torch.tanh(self.w_h @ x + self.u_h @ (r * h) + self.b_h)
        return (1.0 - z) * h + z * cand

    def forward(self, embeddings, dropout_mask=None):
        """Encode a (T, D) tensor into (T, H) hidden states.

        dropout_mask, when given, is a precomputed (T, H) inverted-dropout
        mask applied to the outputs (training mode); None means inference.

        Input projections for all gates are batched over T up front; only the
        hidden-to-hidden work stays inside the recurrence.
        """
        if embeddings.shape[1] != self.input_dim:
            raise ValueError(
                f"embedding dim {embeddings.shape[1]} != encoder input dim "
                f"{self.input_dim}")
        H = self.hidden_dim
        xz = embeddings @ self.w_z.T + self.b_z
        xr = embeddings @ self.w_r.T + self.b_r
        xh = embeddings @ self.w_h.T + self.b_h
        u_zr = torch.cat([self.u_z, self.u_r], dim=0)
        h = embeddings.new_zeros(H)
        outputs = []
        for t in range(embeddings.shape[0]):
            zr = u_zr @ h
            z = torch.sigmoid(xz[t] + zr[:H])
            r = torch.sigmoid(xr[t] + zr[H:])
            cand = torch.tanh(xh[t] + self.u_h @ (r * h))
            h = (1.0 - z) * h + z * cand
            outputs.append(h)
        hidden = torch.stack(outputs)
        if dropout_mask is not None:
            hidden = hidden * dropout_mask
        return hidden

    def forward_batch(self, embeddings, dropout_mask=None):
        """Encode a right-padded (B, T, D) batch into (B, T, H) states.

        Same recurrence as forward with a leading batch dimension;
        dropout_mask, when given, is (B, T, H).
        """
        if embeddings.shape[2] != self.input_dim:
            raise ValueError(
                f"embedding dim {embeddings.shape[2]} != encoder input dim "
                f"{self.input_dim}")
        B, T = embeddings.shape[0], embeddings.shape[1]
        H = self.hidden_dim
        xz = embeddings @ self.w_z.T + self.b_z
        xr = embeddings @ self.w_r.T + self.b_r
        xh = embeddings @ self.w_h.T + self.b_h
        u_zr_t = torch.cat([self.u_z, self.u_r], dim=0).t()
        u_h_t = self.u_h.t()
        h = embeddings.new_zeros(B, H)
        outputs = []
        for t in range(T):
            zr = h @ u_zr_t
            z = torch.sigmoid(xz[:, t] + zr[:, :H])
            r = torch.sigmoid(xr[:, t] + zr[:, H:])
            cand = torch.tanh(xh[:, t] + (r * h) @ u_h_t)
            h = (1.0 - z) * h + z * cand
            outputs.append(h)
        hidden = torch.stack(outputs, dim=1)
        if dropout_mask is not None:
            hidden = hidden * dropout_mask
        return hidden


def sample_dropout_mask(num_tokens, hidden_dim, rate, generator, dtype=torch.float32):
    """Inverted-dropout mask: Bernoulli(1-rate) scaled by 1/(1-rate)."""
    keep = 1.0 - rate
    mask = torch.rand(num_tokens, hidden_dim, generator=generator, dtype=dtype)
    return (mask < keep).to(dtype) / keep
