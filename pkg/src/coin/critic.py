"""Interaction-aware centralized critic.

Three pieces, all evaluated per ego agent over padded neighbour slots:

* ``Cvae``: pairwise conditional VAE whose posterior mean encodes how a
  neighbour influences the ego agent's next observation, state and reward.
* ``GlobalCritic``: node MLP -> stacked graph-attention layers -> ego node
  feature, concatenated with an observation feature -> scalar value.
* ``GlobalQ`` bundles the CVAE with the twin global Q heads; the
  counterfactual baseline is a separate ``GlobalCritic`` whose node inputs
  carry no ego action and no latent.

Batched shapes: ``o`` (B, 91), ``s_i`` (B, 10), ``a_i`` (B, 2),
``s_oth`` (B, M, 10), ``a_oth`` (B, M, 2), ``mask`` (B, M) with M neighbour
slots. Node 0 is always the ego agent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Mlp, MlpSpec, Module, Tensor
from .env import ACTION_DIM, OBS_DIM, STATE_DIM

Y_DIM = OBS_DIM + STATE_DIM + 1


@dataclass(frozen=True)
class CriticConfig:
    latent_dim: int = 20
    node_dim: int = 128
    hidden: int = 256
    gat_layers: int = 2
    graph: str = "full"
    radius: float = 40.0
    position_scale: float = 50.0
    attn_slope: float = 0.2
    logvar_clip: float = 10.0
    beta_kl: float = 1.0

    def validate(self) -> None:
        if self.graph not in ("full", "radius"):
            raise ValueError(f"graph must be 'full' or 'radius', got {self.graph!r}")
        for name in ("latent_dim", "node_dim", "hidden", "gat_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class LatentInteraction:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray


class SplitLinear(Module):
    """Affine map over a concatenation of inputs, one weight block per input.

    Equivalent to ``concat(xs) @ W + b`` but lets inputs with fewer batch axes
    (e.g. one ego observation shared by all neighbour pairs) broadcast.
    """

    def __init__(self, widths, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(sum(widths))
        self.blocks = [ad.param(rng.uniform(-bound, bound, size=(w, n_out))) for w in widths]
        self.bias = ad.param(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, *xs) -> Tensor:
        out = self.bias
        for x, w in zip(xs, self.blocks):
            out = ad.matmul(x, w) + out
        return out


class Cvae(Module):
    def __init__(self, cfg: CriticConfig, rng: np.random.Generator):
        h, L = cfg.hidden, cfg.latent_dim
        self.latent_dim = L
        self.logvar_clip = cfg.logvar_clip
        pair = (STATE_DIM, STATE_DIM, ACTION_DIM, ACTION_DIM)
        self.enc_in = SplitLinear((OBS_DIM, sum(pair)), h, rng)
        self.enc_hidden = Linear(h, h, rng)
        self.enc_out = Linear(h, 2 * L, rng)
        self.dec_in = SplitLinear((L, OBS_DIM, sum(pair)), h, rng)
        self.dec_hidden = Linear(h, h, rng)
        self.dec_out = Linear(h, Y_DIM, rng)

    @staticmethod
    def _pair_inputs(s_i, s_j, a_i, a_j) -> Tensor:
        s_j, a_j = ad.as_tensor(s_j), ad.as_tensor(a_j)
        lead = s_j.shape[:-1]
        s_i = ad.broadcast_to(ad.as_tensor(s_i)[..., None, :], (*lead, STATE_DIM))
        a_i = ad.broadcast_to(ad.as_tensor(a_i)[..., None, :], (*lead, ACTION_DIM))
        return ad.concat([s_i, s_j, a_i, a_j], axis=-1)

    def encode(self, o, s_i, s_j, a_i, a_j):
        """Posterior parameters (mu, logvar), each (B, P, L)."""
        pair = self._pair_inputs(s_i, s_j, a_i, a_j)
        o = ad.as_tensor(o)[..., None, :]
        h = ad.leaky_relu(self.enc_in(o, pair))
        h = ad.leaky_relu(self.enc_hidden(h))
        out = self.enc_out(h)
        L = self.latent_dim
        mu = out[..., :L]
        logvar = ad.clip(out[..., L:], -self.logvar_clip, self.logvar_clip)
        return mu, logvar

    def decode(self, z, o, s_i, s_j, a_i, a_j) -> Tensor:
        pair = self._pair_inputs(s_i, s_j, a_i, a_j)
        o = ad.as_tensor(o)[..., None, :]
        h = ad.leaky_relu(self.dec_in(z, o, pair))
        h = ad.leaky_relu(self.dec_hidden(h))
        return self.dec_out(h)


def kl_divergence(mu, logvar) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    return (0.5 * (mu * mu + ad.exp(logvar) - 1.0 - logvar)).sum(axis=-1)


def cvae_encode(cvae: Cvae, o, s_i, s_j, a_i, a_j, noise=None) -> LatentInteraction:
    """Single-pair convenience wrapper returning plain arrays."""
    with ad.no_grad():
        mu, logvar = cvae.encode(np.asarray(o)[None], np.asarray(s_i)[None], np.asarray(s_j)[None, None],
                                 np.asarray(a_i)[None], np.asarray(a_j)[None, None])
    mu, sigma = mu.data[0, 0], np.exp(0.5 * logvar.data[0, 0])
    z = mu if noise is None else mu + sigma * np.asarray(noise)
    return LatentInteraction(mu, sigma, z)


def cvae_decode(cvae: Cvae, z, o, s_i, s_j, a_i, a_j) -> np.ndarray:
    with ad.no_grad():
        y = cvae.decode(np.asarray(z)[None, None], np.asarray(o)[None], np.asarray(s_i)[None],
                        np.asarray(s_j)[None, None], np.asarray(a_i)[None], np.asarray(a_j)[None, None])
    return y.data[0, 0]


def elbo_loss(cvae: Cvae, o, s_i, s_j, a_i, a_j, target, pair_mask, noise, beta_kl: float = 1.0):
    """Negative ELBO averaged over valid pairs.

    Reconstruction is the unit-variance Gaussian negative log-likelihood
    without its constant, 0.5 * ||y - target||^2. ``target`` is (B, Y_DIM):
    every pair of one ego agent reconstructs the same [o', s', r].
    Returns (loss, reconstruction term, kl term) as tensors.
    """
    mu, logvar = cvae.encode(o, s_i, s_j, a_i, a_j)
    return elbo_from_posterior(cvae, mu, logvar, o, s_i, s_j, a_i, a_j, target, pair_mask, noise, beta_kl)


def elbo_from_posterior(cvae: Cvae, mu, logvar, o, s_i, s_j, a_i, a_j, target, pair_mask, noise,
                        beta_kl: float = 1.0):
    """``elbo_loss`` with an already computed posterior (shares the encoder pass with the critic)."""
    z = ad.reparameterize(mu, ad.exp(0.5 * logvar), noise)
    y = cvae.decode(z, o, s_i, s_j, a_i, a_j)
    w = np.asarray(pair_mask, dtype=np.float64)
    w = w / w.sum()
    err = y - np.asarray(target)[..., None, :]
    recon = ((0.5 * (err * err).sum(axis=-1)) * w).sum()
    kl = (kl_divergence(mu, logvar) * w).sum()
    return recon + beta_kl * kl, recon, kl


# -- graph attention ---------------------------------------------------------
class GatLayer(Module):
    """h_i' = ReLU(sum_j alpha_ij W h_j), alpha_ij = softmax_j LeakyReLU(a^T [W h_i || W h_j]).

    With ``uniform=True`` the attention is replaced by a plain mean over
    neighbours (the mean-pool ablation).
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, slope: float = 0.2,
                 uniform: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = ad.param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.attn = ad.param(rng.uniform(-1.0 / np.sqrt(n_out), 1.0 / np.sqrt(n_out), size=(2 * n_out,)))
        self.n_out = n_out
        self.slope = slope
        self.uniform = uniform

    def coefficients(self, wh: Tensor, adj: np.ndarray) -> Tensor:
        if self.uniform:
            a = np.asarray(adj, dtype=np.float64)
            return Tensor(a / a.sum(axis=-1, keepdims=True))
        F = self.n_out
        src = ad.matmul(wh, self.attn[:F].reshape(F, 1))
        dst = ad.matmul(wh, self.attn[F:].reshape(F, 1))
        e = ad.leaky_relu(src + dst.reshape(*dst.shape[:-2], 1, dst.shape[-2]), self.slope)
        return ad.softmax(e, axis=-1, mask=adj)

    def __call__(self, h, adj: np.ndarray, return_attention: bool = False):
        adj = np.asarray(adj, dtype=bool)
        if not np.all(adj.any(axis=-1)):
            raise ValueError("gat_layer: every node needs a non-empty neighbourhood")
        wh = ad.matmul(h, self.weight)
        alpha = self.coefficients(wh, adj)
        out = ad.relu(ad.matmul(alpha, wh))
        return (out, alpha) if return_attention else out


def gat_layer(h, adj, weight, attn, slope: float = 0.2):
    """Functional form over explicit (W, a_gat); returns (features, attention)."""
    layer = GatLayer.__new__(GatLayer)
    layer.weight, layer.attn = ad.as_tensor(weight), ad.as_tensor(attn)
    layer.n_out, layer.slope, layer.uniform = layer.weight.shape[1], slope, False
    return layer(h, adj, return_attention=True)


def adjacency(node_mask: np.ndarray, positions: np.ndarray | None = None, radius: float | None = None) -> np.ndarray:
    """(B, N, N) boolean adjacency over valid nodes, self-loops always present."""
    m = np.asarray(node_mask, dtype=bool)
    adj = m[..., :, None] & m[..., None, :]
    if radius is not None and positions is not None:
        d = np.linalg.norm(positions[..., :, None, :] - positions[..., None, :, :], axis=-1)
        adj &= d <= radius
    n = m.shape[-1]
    return adj | np.eye(n, dtype=bool)


class GlobalCritic(Module):
    def __init__(self, node_in: int, cfg: CriticConfig, rng: np.random.Generator, use_gat: bool = True):
        h, f = cfg.hidden, cfg.node_dim
        self.node_mlp = Mlp(MlpSpec((node_in, h, f), ("leaky_relu", "leaky_relu")), rng)
        self.gat = [GatLayer(f, f, rng, cfg.attn_slope, uniform=not use_gat) for _ in range(cfg.gat_layers)]
        self.obs_mlp = Mlp(MlpSpec((OBS_DIM, h, h), ("leaky_relu", "leaky_relu")), rng)
        self.head = Linear(f + h, 1, rng)

    def __call__(self, o, nodes, adj) -> Tensor:
        h = self.node_mlp(nodes)
        for layer in self.gat:
            h = layer(h, adj)
        ego = h[..., 0, :]
        feat = self.obs_mlp(o)
        return self.head(ad.concat([ego, feat], axis=-1))[..., 0]


def build_graph(cfg: CriticConfig, s_i, s_oth, mask) -> np.ndarray:
    """Adjacency over (ego, neighbours); ``radius`` mode uses the de-normalized positions."""
    s_i = s_i.data if isinstance(s_i, Tensor) else np.asarray(s_i)
    s_oth = s_oth.data if isinstance(s_oth, Tensor) else np.asarray(s_oth)
    node_mask = np.concatenate([np.ones((*s_i.shape[:-1], 1), dtype=bool), np.asarray(mask, dtype=bool)], axis=-1)
    if cfg.graph == "radius":
        pos = np.concatenate([s_i[..., None, :2], s_oth[..., :2]], axis=-2) * cfg.position_scale
        return adjacency(node_mask, pos, cfg.radius)
    return adjacency(node_mask)


def _ego_flag(batch_shape, n_nodes) -> np.ndarray:
    flag = np.zeros((*batch_shape, n_nodes, 1))
    flag[..., 0, 0] = 1.0
    return flag


class GlobalQ(Module):
    """CVAE + twin global Q heads. ``use_vae=False`` drops the latent from node inputs."""

    def __init__(self, cfg: CriticConfig, rng: np.random.Generator, use_vae: bool = True, use_gat: bool = True):
        self.cfg = cfg
        self.use_vae = use_vae
        node_in = STATE_DIM + ACTION_DIM + (cfg.latent_dim if use_vae else 0) + 1
        if use_vae:
            self.cvae = Cvae(cfg, rng)
        self.q1 = GlobalCritic(node_in, cfg, rng, use_gat)
        self.q2 = GlobalCritic(node_in, cfg, rng, use_gat)

    def graph(self, s_i, s_oth, mask) -> np.ndarray:
        return build_graph(self.cfg, s_i, s_oth, mask)

    @staticmethod
    def pairs(s_i, a_i, s_oth, a_oth):
        """Pair partners (self, neighbour_1..M): states (B, M+1, 10), actions (B, M+1, 2)."""
        s_j = ad.concat([ad.as_tensor(s_i)[..., None, :], ad.as_tensor(s_oth)], axis=-2)
        a_j = ad.concat([ad.as_tensor(a_i)[..., None, :], ad.as_tensor(a_oth)], axis=-2)
        return s_j, a_j

    def posterior(self, o, s_i, a_i, s_oth, a_oth):
        s_j, a_j = self.pairs(s_i, a_i, s_oth, a_oth)
        return self.cvae.encode(o, s_i, s_j, a_i, a_j)

    def latents(self, o, s_i, a_i, s_oth, a_oth) -> Tensor:
        """Posterior means for (self, neighbour_1..M), shape (B, M+1, L)."""
        return self.posterior(o, s_i, a_i, s_oth, a_oth)[0]

    def nodes(self, s_i, a_i, s_oth, a_oth, z=None) -> Tensor:
        s = ad.concat([ad.as_tensor(s_i)[..., None, :], ad.as_tensor(s_oth)], axis=-2)
        a = ad.concat([ad.as_tensor(a_i)[..., None, :], ad.as_tensor(a_oth)], axis=-2)
        parts = [s, a] + ([z] if z is not None else [])
        parts.append(_ego_flag(s.shape[:-2], s.shape[-2]))
        return ad.concat(parts, axis=-1)

    def forward_with_latents(self, o, a_i, s_i, s_oth, a_oth, z, mask, heads=(1, 2)):
        nodes = self.nodes(s_i, a_i, s_oth, a_oth, z if self.use_vae else None)
        adj = self.graph(s_i, s_oth, mask)
        return tuple((self.q1 if k == 1 else self.q2)(o, nodes, adj) for k in heads)

    def __call__(self, o, a_i, s_i, s_oth, a_oth, mask, heads=(1, 2)):
        z = self.latents(o, s_i, a_i, s_oth, a_oth) if self.use_vae else None
        return self.forward_with_latents(o, a_i, s_i, s_oth, a_oth, z, mask, heads)


class Baseline(Module):
    """Counterfactual baseline V(o_i, s_i, s_-i, a_-i): the ego action is not an input."""

    def __init__(self, cfg: CriticConfig, rng: np.random.Generator, use_gat: bool = True):
        self.cfg = cfg
        self.net = GlobalCritic(STATE_DIM + ACTION_DIM + 1, cfg, rng, use_gat)

    def __call__(self, o, s_i, s_oth, a_oth, mask) -> Tensor:
        s = ad.concat([ad.as_tensor(s_i)[..., None, :], ad.as_tensor(s_oth)], axis=-2)
        a_oth = ad.as_tensor(a_oth)
        no_ego_action = np.zeros((*a_oth.shape[:-2], 1, ACTION_DIM))
        a = ad.concat([no_ego_action, a_oth], axis=-2)
        nodes = ad.concat([s, a, _ego_flag(s.shape[:-2], s.shape[-2])], axis=-1)
        return self.net(o, nodes, build_graph(self.cfg, s_i, s_oth, mask))


def global_q_forward(net: GlobalQ, o, a_i, s_i, s_oth, a_oth, z, mask, head: int = 1) -> float:
    """Unbatched Q^G for one ego agent; ``z`` holds latents for (self, neighbours)."""
    with ad.no_grad():
        (q,) = net.forward_with_latents(np.asarray(o)[None], np.asarray(a_i)[None], np.asarray(s_i)[None],
                                        np.asarray(s_oth)[None], np.asarray(a_oth)[None],
                                        None if z is None else Tensor(np.asarray(z)[None]),
                                        np.asarray(mask)[None], heads=(head,))
    return float(q.data[0])


def baseline_forward(net: Baseline, o, s_i, s_oth, a_oth, mask) -> float:
    with ad.no_grad():
        v = net(np.asarray(o)[None], np.asarray(s_i)[None], np.asarray(s_oth)[None], np.asarray(a_oth)[None],
                np.asarray(mask)[None])
    return float(v.data[0])
