"""Deep graph matching network producing soft correspondences between two clouds.

Pipeline per pair of clouds: a shared local feature extractor gives initial
node features; then ``L`` blocks, each an edge generator (transformer),
an intra-graph convolution, an affinity / instance-norm / Sinkhorn matcher,
and (except in the last block) a cross-graph convolution that replaces the
node features for the next block.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .assignment import SoftCorrespondence, append_slack, instance_norm_exp, sinkhorn
from .autodiff import EPS, Linear, Module, Parameter, Tensor
from .geometry import knn

VARIANTS = ("full", "ais_variant", "fullconnect_edges")


@dataclass
class ModelConfig:
    K: int = 20
    V: int = 1024
    L: int = 2
    Q: int = 512
    stage_dims: tuple = (64, 64, 128, 256)
    d_model: int = 256
    n_heads: int = 4
    ff_dim: int = 512
    sinkhorn_iters: int = 10
    variant: str = "full"
    init_seed: int = 0

    def __post_init__(self):
        self.stage_dims = tuple(int(s) for s in self.stage_dims)
        if self.K < 2 or self.L < 1:
            raise ValueError("need K >= 2 and L >= 1")
        dims = (self.V, self.Q, self.d_model, self.n_heads, self.ff_dim, self.sinkhorn_iters)
        if min(dims) < 1 or not self.stage_dims or min(self.stage_dims) < 1:
            raise ValueError("all dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def small(cls, **overrides):
        """Desk-scale configuration (V=64, Q=32) used for training and checks."""
        base = dict(V=64, Q=32, stage_dims=(32, 32, 64, 64), d_model=32, n_heads=4, ff_dim=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# layers


class LocalFeatureExtractor(Module):
    """Shared per-neighbour MLP over (center, neighbour) pairs with per-stage max pooling."""

    def __init__(self, stage_dims, out_dim, rng):
        dims = (6,) + tuple(stage_dims)
        self.stages = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.proj = Linear(sum(stage_dims), out_dim, rng, gain=1.0)

    def __call__(self, X, neighbors):
        n, k = neighbors.shape
        centers = ad.gather_rows(X, np.repeat(np.arange(n), k))
        others = ad.gather_rows(X, neighbors.reshape(-1))
        h = ad.concat([centers, others], axis=1)
        pooled = []
        for layer in self.stages:
            h = ad.relu(layer(h))
            pooled.append(ad.max(ad.reshape(h, (n, k, h.shape[1])), axis=1))
        return self.proj(ad.concat(pooled, axis=1))


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x):
        z = (x - ad.mean(x, axis=-1, keepdims=True)) * ad.power(
            ad.var(x, axis=-1, keepdims=True) + 1e-5, -0.5)
        return z * self.gamma + self.beta


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng, gain=1.0)
        # no key bias: it adds a per-query constant to the scores, which softmax cancels
        self.k = Linear(dim, dim, rng, bias=False, gain=1.0)
        self.v = Linear(dim, dim, rng, gain=1.0)
        self.o = Linear(dim, dim, rng, gain=1.0)

    def _split(self, x):
        n, d = x.shape
        return ad.transpose(ad.reshape(x, (n, self.heads, d // self.heads)), (1, 0, 2))

    def __call__(self, query, context):
        n, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        scores = ad.affine(q @ ad.transpose(k), 1.0 / math.sqrt(d // self.heads))
        out = ad.softmax(scores, axis=-1) @ v
        return self.o(ad.reshape(ad.transpose(out, (1, 0, 2)), (n, d)))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, gain=1.0)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, dim, heads, hidden, rng):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x):
        x = self.norm1(x + self.attn(x, x))
        return self.norm2(x + self.ff(x))


class DecoderLayer(Module):
    """Co-attention: queries from one cloud, keys and values from the other."""

    def __init__(self, dim, heads, hidden, rng):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, other):
        x = self.norm1(x + self.attn(x, other))
        return self.norm2(x + self.ff(x))


class EdgeGenerator(Module):
    def __init__(self, in_dim, cfg, rng):
        self.embed = Linear(in_dim, cfg.d_model, rng, gain=1.0)
        self.encoder = EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim, rng)
        self.decoder = DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim, rng)
        self.scale = 1.0 / math.sqrt(cfg.d_model)

    def embeddings(self, FX, FY):
        ex = self.encoder(self.embed(FX))
        ey = self.encoder(self.embed(FY))
        return self.decoder(ex, ey), self.decoder(ey, ex)

    def __call__(self, FX, FY):
        TX, TY = self.embeddings(FX, FY)
        EX = ad.softmax(ad.affine(TX @ ad.transpose(TX), self.scale), axis=1)
        EY = ad.softmax(ad.affine(TY @ ad.transpose(TY), self.scale), axis=1)
        return EX, EY


def uniform_edges(n, dtype=None):
    return Tensor(np.full((n, n), 1.0 / n), dtype=dtype)


class IntraGraphConv(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.f_adj = Linear(in_dim, out_dim, rng)
        self.f_self = Linear(in_dim, out_dim, rng)

    def __call__(self, F, E):
        E = ad.as_tensor(E)
        En = E / ad.clip(ad.sum(E, axis=1, keepdims=True), EPS, np.inf)
        return En @ ad.relu(self.f_adj(F)) + ad.relu(self.f_self(F))


class Affinity(Module):
    """Bilinear affinity ``Fx · W_sym · Fyᵀ`` with ``W_sym = (W + Wᵀ) / 2``."""

    def __init__(self, dim, rng):
        self.W = Parameter(np.eye(dim) + rng.normal(0.0, 0.01, size=(dim, dim)))

    def __call__(self, FX, FY):
        Ws = ad.affine(self.W + ad.transpose(self.W), 0.5)
        return FX @ Ws @ ad.transpose(FY)


class CrossGraphConv(Module):
    def __init__(self, dim, rng):
        self.f_cross = Linear(2 * dim, dim, rng, gain=1.0)

    def __call__(self, FX, FY, C):
        P = C.probs if isinstance(C, SoftCorrespondence) else ad.as_tensor(C)
        new_x = self.f_cross(ad.concat([FX, P @ FY], axis=1))
        new_y = self.f_cross(ad.concat([FY, ad.transpose(P) @ FX], axis=1))
        return new_x, new_y


# ---------------------------------------------------------------------------
# matching heads


def ais_forward(FX, FY, W=None, iters=10, affinity=None):
    """Affinity, instance normalisation, slack, Sinkhorn."""
    if affinity is not None:
        A = affinity(FX, FY)
    else:
        A = ad.as_tensor(FX) @ ad.as_tensor(W) @ ad.transpose(ad.as_tensor(FY))
    return sinkhorn(append_slack(instance_norm_exp(A)), iters)


def pairwise_feature_distance(FX, FY):
    FX, FY = ad.as_tensor(FX), ad.as_tensor(FY)
    sq = (ad.sum(FX * FX, axis=1, keepdims=True) + ad.transpose(ad.sum(FY * FY, axis=1, keepdims=True))
          - ad.affine(FX @ ad.transpose(FY), 2.0))
    return ad.power(ad.clip(sq, EPS, np.inf), 0.5)


def ais_variant_forward(FX, FY, iters=10):
    """Ablation matcher: ``exp(-(D - 0.5))`` on feature distances, then slack + Sinkhorn."""
    if FX.shape[1] != FY.shape[1]:
        raise ad.ShapeError(f"ais_variant_forward: feature dims differ {FX.shape} vs {FY.shape}")
    D = pairwise_feature_distance(FX, FY)
    return sinkhorn(append_slack(ad.exp(ad.affine(D, -1.0, 0.5))), iters)


# ---------------------------------------------------------------------------
# model


class Block(Module):
    def __init__(self, in_dim, cfg, rng, cross):
        if cfg.variant != "fullconnect_edges":
            self.edges = EdgeGenerator(in_dim, cfg, rng)
        self.intra = IntraGraphConv(in_dim, cfg.Q, rng)
        if cfg.variant != "ais_variant":
            self.affinity = Affinity(cfg.Q, rng)
        if cross:
            self.cross = CrossGraphConv(cfg.Q, rng)


class RGMNet(Module):
    """The full matching network; both clouds share every weight."""

    def __init__(self, config=None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        self.extractor = LocalFeatureExtractor(cfg.stage_dims, cfg.V, rng)
        self.blocks = [Block(cfg.V if i == 0 else cfg.Q, cfg, rng, cross=i < cfg.L - 1)
                       for i in range(cfg.L)]

    def local_features(self, X):
        X = ad.as_tensor(X)
        n = X.shape[0]
        if n <= self.config.K:
            raise ValueError(f"cloud of {n} points needs more than K={self.config.K} points")
        return self.extractor(X, knn(X.data, X.data, self.config.K))

    def supports(self, variant):
        """A full model can also run either ablation at inference; a variant model only itself."""
        return variant == self.config.variant or self.config.variant == "full"

    def forward(self, X, Y, return_features=False, variant=None):
        cfg = self.config
        variant = variant or cfg.variant
        if variant not in VARIANTS or not self.supports(variant):
            raise ValueError(f"a {cfg.variant!r} model cannot run variant {variant!r}")
        FX, FY = self.local_features(X), self.local_features(Y)
        C = None
        for block in self.blocks:
            if variant == "fullconnect_edges":
                EX, EY = uniform_edges(FX.shape[0]), uniform_edges(FY.shape[0])
            else:
                EX, EY = block.edges(FX, FY)
            cx, cy = block.intra(FX, EX), block.intra(FY, EY)
            if variant == "ais_variant":
                C = ais_variant_forward(cx, cy, cfg.sinkhorn_iters)
            else:
                C = ais_forward(cx, cy, iters=cfg.sinkhorn_iters, affinity=block.affinity)
            if hasattr(block, "cross"):
                FX, FY = block.cross(cx, cy, C)
        if return_features:
            return C, (cx, cy)
        return C

    __call__ = forward

    def correspondence(self, X, Y, variant=None):
        with ad.no_grad():
            return self.forward(X, Y, variant=variant)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"dim mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data[...] = state[name]


def rgm_forward(X, Y, model):
    return model.forward(X, Y)
