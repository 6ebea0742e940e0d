"""Face-parameter embedding for loan records.

The embedding maps a standardized loan record to an 11-channel expression
vector.  Nine conceptual dimensions become eleven outputs because opposed
emotions get separate non-negative channels instead of one signed axis:
happiness/sadness split, and surprise splits into a happy and a sad variant
(happy surprise may only co-occur with happiness).  Sigmoid bounds the
non-negative channels, tanh the bipolar ones, and a pairwise product
penalty discourages incompatible emotions from firing together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..nn import Activation, Adam, Dense, Network, Tensor, gather_rows

# (name, kind): kind "unit" -> sigmoid in (0,1), "bipolar" -> tanh in (-1,1)
CHANNELS = (
    ("happiness", "unit"),
    ("sadness", "unit"),
    ("happy_surprise", "unit"),
    ("sad_surprise", "unit"),
    ("anger", "unit"),
    ("fear", "unit"),
    ("age", "unit"),
    ("trustworthiness", "bipolar"),
    ("dominance", "bipolar"),
    ("hue", "bipolar"),
    ("eye_gaze", "bipolar"),
)
CHANNEL_NAMES = tuple(name for name, _ in CHANNELS)
UNIT_MASK = np.array([1.0 if kind == "unit" else 0.0 for _, kind in CHANNELS])

INCOMPATIBLE_PAIRS = (
    ("happiness", "sadness"),
    ("happy_surprise", "sad_surprise"),
    ("happy_surprise", "sadness"),
    ("sad_surprise", "happiness"),
)
_PAIR_INDICES = tuple(
    (CHANNEL_NAMES.index(a), CHANNEL_NAMES.index(b)) for a, b in INCOMPATIBLE_PAIRS
)


@dataclass
class AvatarVector:
    values: np.ndarray  # (11,) in channel order

    def __getitem__(self, name: str) -> float:
        return float(self.values[CHANNEL_NAMES.index(name)])

    def to_doc(self) -> dict:
        return {name: float(v) for name, v in zip(CHANNEL_NAMES, self.values)}


class AvatarEmbedder:
    """One hidden layer (25 relu units) into the 11 bounded channels."""

    def __init__(self, input_dim: int, hidden: int = 25, rng: np.random.Generator | None = None):
        self.input_dim = input_dim
        self.trunk = Network([Dense(input_dim, hidden, rng=rng), Activation("relu"), Dense(hidden, len(CHANNELS), rng=rng)])
        self._unit = Tensor(UNIT_MASK)
        self._bipolar = Tensor(1.0 - UNIT_MASK)

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters()

    def forward(self, x) -> Tensor:
        raw = self.trunk.forward(x)
        return raw.sigmoid() * self._unit + raw.tanh() * self._bipolar

    __call__ = forward

    def state_vector(self) -> np.ndarray:
        return self.trunk.state_vector()

    def load_state_vector(self, vec: np.ndarray) -> None:
        self.trunk.load_state_vector(vec)

    def copy(self) -> "AvatarEmbedder":
        clone = AvatarEmbedder(self.input_dim, hidden=self.trunk.layers[0].out_dim)
        clone.load_state_vector(self.state_vector())
        return clone


def embed(embedder: AvatarEmbedder, x: np.ndarray) -> AvatarVector:
    """Embed a single standardized record."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != embedder.input_dim:
        raise ValueError(f"expected a ({embedder.input_dim},) record, got shape {x.shape}")
    return AvatarVector(embedder.forward(x[None]).data[0])


def new_decoder(input_dim: int, hidden: int = 25, rng: np.random.Generator | None = None) -> Network:
    """Decoder from expression space back to record space (the reconstruction head)."""
    return Network([Dense(len(CHANNELS), hidden, rng=rng), Activation("relu"), Dense(hidden, input_dim, rng=rng)])


# ----------------------------------------------------------------------
# penalties and losses
# ----------------------------------------------------------------------
def constraint_penalty(z) -> Tensor | float:
    """Sum of products of positive activations over the incompatible pairs.

    Accepts a (11,) vector or a (batch, 11) Tensor/array; batched input
    returns the mean penalty.
    """
    if isinstance(z, Tensor):
        zp = z.relu()
        if z.data.ndim == 1:
            total = Tensor(0.0)
            for a, b in _PAIR_INDICES:
                total = total + zp[a] * zp[b]
            return total
        total = Tensor(0.0)
        for a, b in _PAIR_INDICES:
            total = total + (zp[:, a] * zp[:, b]).mean()
        return total
    zp = np.maximum(np.asarray(z, dtype=np.float64), 0.0)
    pairs = sum(zp[..., a] * zp[..., b] for a, b in _PAIR_INDICES)
    return float(np.mean(pairs))


def reconstruction_loss(decoder: Network, embedder: AvatarEmbedder, x: np.ndarray) -> float:
    """Squared reconstruction error ||x - psi(phi(x))||^2 of one record."""
    x = np.asarray(x, dtype=np.float64)
    recon = decoder.forward(embedder.forward(x[None])).data[0]
    return float(((x - recon) ** 2).sum())


def reconstruction_loss_t(decoder: Network, z: Tensor, x_batch: np.ndarray) -> Tensor:
    """Differentiable mean squared reconstruction error over a batch."""
    diff = decoder.forward(z) - Tensor(x_batch)
    return (diff * diff).sum(axis=1).mean()


# ----------------------------------------------------------------------
# marginal-matching pretraining
# ----------------------------------------------------------------------
# Deliberate deviation from the adversarial initializer the original setup
# used: per-channel quantile matching has the same stated purpose (spread the
# initial expressions over the feasible range) at a fraction of the moving
# parts.
MARGINALS = {
    "unit_emotion": ("beta", (1.0, 2.0)),      # mild expressions, mass near 0
    "age": ("uniform", (0.0, 1.0)),
    "bipolar": ("clipped_normal", (0.0, 2.0)), # N(0, 4) clipped into (-1, 1)
}
QUANTILE_LEVELS = (np.arange(32) + 0.5) / 32.0


def default_marginals() -> list[tuple[str, tuple]]:
    specs = []
    for name, kind in CHANNELS:
        if kind == "bipolar":
            specs.append(MARGINALS["bipolar"])
        elif name == "age":
            specs.append(MARGINALS["age"])
        else:
            specs.append(MARGINALS["unit_emotion"])
    return specs


def marginal_quantiles(spec: tuple[str, tuple], levels: np.ndarray = QUANTILE_LEVELS) -> np.ndarray:
    family, params = spec
    if family == "beta":
        return stats.beta.ppf(levels, *params)
    if family == "uniform":
        lo, hi = params
        return lo + (hi - lo) * levels
    if family == "clipped_normal":
        mean, sd = params
        return np.clip(stats.norm.ppf(levels, mean, sd), -1.0, 1.0)
    raise ValueError(f"unknown marginal family {family!r}")


def pretrain_embedding(
    embedder: AvatarEmbedder,
    data: np.ndarray,
    seed: int = 0,
    marginals: list[tuple[str, tuple]] | None = None,
    epochs: int = 400,
    lr: float = 0.02,
    batch: int = 256,
) -> list[float]:
    """Push each output channel toward its target marginal via quantile loss.

    Every step sorts the batch per channel and penalizes the squared gap
    between 32 evenly spaced order statistics and the target quantiles; the
    pushforward of the data approximates the marginals without any pairing
    between records and target draws.
    """
    rng = np.random.default_rng(seed)
    specs = marginals if marginals is not None else default_marginals()
    targets = np.stack([marginal_quantiles(spec) for spec in specs], axis=1)  # (32, 11)
    opt = Adam(embedder.parameters(), lr=lr)
    n = len(data)
    losses = []
    for _ in range(epochs):
        idx = rng.choice(n, size=min(batch, n), replace=False)
        z = embedder.forward(data[idx])
        b = z.shape[0]
        positions = np.minimum((QUANTILE_LEVELS * b).astype(int), b - 1)
        opt.zero_grad()
        loss = Tensor(0.0)
        for c in range(len(CHANNELS)):
            col = z[:, c]
            order = np.argsort(col.data, kind="stable")
            picked = gather_rows(col, order[positions])
            diff = picked - targets[:, c]
            loss = loss + (diff * diff).mean()
        losses.append(loss.item())
        loss.backward()
        opt.step()
    return losses
