"""Minimal feed-forward networks with exact analytic gradients.

Everything operates on flat float64 parameter vectors described by a layer
manifest, which keeps the trust-region algebra (inner products, CG,
Fisher-vector products) trivial. Hidden activations are ReLU; initialization
is orthogonal with zero biases. The hybrid policy head outputs Gaussian means
(pre-squash; actions squash through a sigmoid into [0, 1]) and Bernoulli
logits; log-stds are state-independent learned parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HUBER_DELTA = 1.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class Manifest:
    """Layer sizes and the flat layout [W0, b0, W1, b1, ...]."""

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("manifest needs at least input and output sizes")
        self.offsets = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.offsets.append((off, off + fan_in * fan_out))
            off += fan_in * fan_out + fan_out
        self.n_params = off

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def weights(self, theta: np.ndarray):
        """Views (W, b) per layer; W has shape (out, in)."""
        out = []
        for k, (w0, w1) in enumerate(self.offsets):
            fan_in, fan_out = self.sizes[k], self.sizes[k + 1]
            w = theta[w0:w1].reshape(fan_out, fan_in)
            b = theta[w1:w1 + fan_out]
            out.append((w, b))
        return out


def orthogonal_init(manifest: Manifest, rng: np.random.Generator) -> np.ndarray:
    """Semi-orthogonal weights (QR of a Gaussian draw), zero biases."""
    theta = np.zeros(manifest.n_params)
    for k, (w0, w1) in enumerate(manifest.offsets):
        fan_in, fan_out = manifest.sizes[k], manifest.sizes[k + 1]
        a = rng.standard_normal((max(fan_out, fan_in), min(fan_out, fan_in)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))          # fix QR sign ambiguity
        w = q if fan_out >= fan_in else q.T
        theta[w0:w1] = w.reshape(-1)
    return theta


def forward(theta: np.ndarray, manifest: Manifest, x: np.ndarray, want_cache: bool = False):
    """Batched forward pass. x is (B, n_in); returns (B, n_out) [, cache]."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != manifest.n_in:
        raise ValueError(f"input width {x.shape[1]} != manifest {manifest.n_in}")
    acts = [x]
    pre = []
    a = x
    layers = manifest.weights(theta)
    for k, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(a)
    if want_cache:
        return a, (acts, pre)
    return a


def backward(theta: np.ndarray, manifest: Manifest, cache, d_out: np.ndarray) -> np.ndarray:
    """Exact VJP: gradient of sum(d_out * output) w.r.t. the flat parameters."""
    acts, pre = cache
    layers = manifest.weights(theta)
    grad = np.zeros_like(theta)
    dz = np.asarray(d_out, dtype=float)
    for k in range(len(layers) - 1, -1, -1):
        w0, w1 = manifest.offsets[k]
        fan_out = manifest.sizes[k + 1]
        grad[w0:w1] = (dz.T @ acts[k]).reshape(-1)
        grad[w1:w1 + fan_out] = dz.sum(axis=0)
        if k > 0:
            da = dz @ layers[k][0]
            dz = da * (pre[k - 1] > 0.0)
    return grad


def jvp(theta: np.ndarray, manifest: Manifest, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Forward-mode directional derivative of the outputs along parameter v."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    layers = manifest.weights(theta)
    vlayers = manifest.weights(np.asarray(v, dtype=float))
    a, da = x, np.zeros_like(x)
    for k, ((w, b), (dw, db)) in enumerate(zip(layers, vlayers)):
        z = a @ w.T + b
        dz = a @ dw.T + da @ w.T + db
        if k < len(layers) - 1:
            gate = z > 0.0
            a = z * gate
            da = dz * gate
        else:
            a, da = z, dz
    return da


# -- hybrid policy distribution -------------------------------------------


@dataclass
class PolicyDistribution:
    """Gaussian over pre-squash continuous dims + Bernoulli over discrete dims."""

    mean: np.ndarray      # (B, C)
    log_std: np.ndarray   # (C,)
    on_logit: np.ndarray  # (B, D)

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def on_prob(self) -> np.ndarray:
        return _sigmoid(self.on_logit)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_sigmoid = sigmoid


def _softplus(x):
    return np.logaddexp(0.0, x)


def log_prob(dist: PolicyDistribution, u: np.ndarray, o: np.ndarray,
             mask: np.ndarray | None = None) -> np.ndarray:
    """Per-sample joint log-probability; masked discrete dims contribute 0."""
    u = np.atleast_2d(u)
    o = np.atleast_2d(o)
    std = dist.std
    z = (u - dist.mean) / std
    lp = np.sum(-0.5 * z**2 - np.log(std) - _HALF_LOG_2PI, axis=1)
    logit = dist.on_logit
    lp_disc = np.where(o > 0.5, -_softplus(-logit), -_softplus(logit))
    if mask is not None:
        lp_disc = np.where(np.atleast_2d(mask), 0.0, lp_disc)
    return lp + lp_disc.sum(axis=1)


def kl_divergence(dist_p: PolicyDistribution, dist_q: PolicyDistribution,
                  mask: np.ndarray | None = None, reduce: bool = True):
    """KL(p || q) in closed form; masked discrete dims excluded."""
    sp, sq = dist_p.std, dist_q.std
    dmu = dist_p.mean - dist_q.mean
    kl_c = np.sum(
        np.log(sq / sp) + (sp**2 + dmu**2) / (2.0 * sq**2) - 0.5, axis=1
    )
    lp_, lq_ = dist_p.on_logit, dist_q.on_logit
    p = _sigmoid(lp_)
    # p*log(p/q) + (1-p)*log((1-p)/(1-q)); log q = -softplus(-l), log(1-q) = -softplus(l)
    kl_d = p * (_softplus(-lq_) - _softplus(-lp_)) + (1.0 - p) * (
        _softplus(lq_) - _softplus(lp_)
    )
    if mask is not None:
        kl_d = np.where(np.atleast_2d(mask), 0.0, kl_d)
    per_sample = kl_c + kl_d.sum(axis=1)
    return float(per_sample.mean()) if reduce else per_sample


def entropy(dist: PolicyDistribution, mask: np.ndarray | None = None) -> float:
    std = dist.std
    h_c = np.sum(np.log(std) + 0.5 + _HALF_LOG_2PI)
    q = dist.on_prob
    h_d = _softplus(dist.on_logit) - dist.on_logit * q
    if mask is not None:
        h_d = np.where(np.atleast_2d(mask), 0.0, h_d)
    return float(h_c + h_d.sum(axis=1).mean())


# -- advantage estimation and critic updates --------------------------------


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates over one episode.

    ``values`` has length T+1 (terminal bootstrap included, normally 0).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) != len(rewards) + 1:
        raise ValueError("values must have length len(rewards) + 1")
    adv = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def huber(x, delta: float = HUBER_DELTA):
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x**2, delta * (ax - 0.5 * delta))


def dhuber(x, delta: float = HUBER_DELTA):
    return np.clip(x, -delta, delta)


class PopArt:
    """Running normalization of value targets preserving network outputs.

    When the statistics move, the output layer is rescaled so the denormalized
    prediction is unchanged. Off by default; useful when returns are hundreds
    of dollars while the critic learning rate is tuned for unit scale.
    """

    def __init__(self, beta: float = 3e-4):
        self.beta = beta
        self.mean = 0.0
        self.sq = 1.0
        self.initialized = False

    @property
    def std(self) -> float:
        return float(np.sqrt(max(self.sq - self.mean**2, 1e-4)))

    def observe(self, targets) -> tuple[float, float]:
        """Fold targets into the running stats; returns the pre-update stats.

        Kept separate from ``rescale`` so several critics can share one
        normalizer: observe once per iteration, rescale each critic with the
        same before/after pair (consensus averaging then stays well-defined).
        """
        targets = np.asarray(targets, dtype=float)
        old = (self.mean, self.std) if self.initialized else (0.0, 1.0)
        if not self.initialized:
            self.mean = float(targets.mean())
            self.sq = float((targets**2).mean())
            self.initialized = True
        else:
            b = min(self.beta * len(targets), 1.0)
            self.mean = (1 - b) * self.mean + b * float(targets.mean())
            self.sq = (1 - b) * self.sq + b * float((targets**2).mean())
        return old

    def rescale(self, theta: np.ndarray, manifest: Manifest,
                old_mean: float, old_std: float) -> np.ndarray:
        """Adjust the output layer so denormalized predictions are preserved."""
        theta = theta.copy()
        w0, w1 = manifest.offsets[-1]
        fan_out = manifest.sizes[-1]
        theta[w0:w1] *= old_std / self.std
        theta[w1:w1 + fan_out] = (
            theta[w1:w1 + fan_out] * old_std + old_mean - self.mean
        ) / self.std
        return theta

    def update(self, targets, theta: np.ndarray, manifest: Manifest) -> np.ndarray:
        """Single-critic convenience: observe then rescale."""
        old_mean, old_std = self.observe(targets)
        return self.rescale(theta, manifest, old_mean, old_std)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean


def value_of(theta: np.ndarray, manifest: Manifest, states: np.ndarray,
             popart: PopArt | None = None) -> np.ndarray:
    v = forward(theta, manifest, states)[:, 0]
    return popart.denormalize(v) if popart is not None else v


def td_update(theta: np.ndarray, manifest: Manifest, states: np.ndarray,
              rewards: np.ndarray, next_states: np.ndarray, terminal: np.ndarray,
              gamma: float, lr: float, popart: PopArt | None = None) -> np.ndarray:
    """One batched semi-gradient Huber TD(0) step; returns the updated params.

    With a PopArt normalizer the critic learns normalized values; the caller
    is responsible for observe/rescale before the update sweep.
    """
    states = np.atleast_2d(states)
    next_states = np.atleast_2d(next_states)
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    v_next = forward(theta, manifest, next_states)[:, 0]
    if popart is not None:
        v_next = popart.denormalize(v_next)
    targets = rewards + gamma * np.where(terminal, 0.0, v_next)
    if popart is not None:
        targets = popart.normalize(targets)
    v, cache = forward(theta, manifest, states, want_cache=True)
    delta = targets - v[:, 0]
    if not np.all(np.isfinite(delta)):
        raise FloatingPointError("divergent critic: non-finite TD errors")
    d_out = (dhuber(delta) / len(delta)).reshape(-1, 1)
    grad = backward(theta, manifest, cache, d_out)
    return theta + lr * grad


class Adam:
    """Plain Adam on a flat parameter vector (used by the PPO baseline).

    ``step`` ascends along the supplied gradient.
    """

    def __init__(self, n: int, lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta + self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- policy head --------------------------------------------------------------


class HybridPolicy:
    """MLP head producing Gaussian means and Bernoulli logits.

    The flat parameter vector is [net weights | log_std per continuous dim];
    continuous actions live in pre-squash space (sigmoid squashes into [0,1]).
    Forced discrete dims are masked out of log-probabilities, gradients and KL.
    """

    def __init__(self, obs_dim: int, n_cont: int, n_disc: int, hidden=(128, 32)):
        self.n_cont = int(n_cont)
        self.n_disc = int(n_disc)
        self.manifest = Manifest([obs_dim, *hidden, self.n_cont + self.n_disc])
        self.n_params = self.manifest.n_params + self.n_cont

    def init_params(self, rng: np.random.Generator, log_std_init: float = -0.5,
                    on_bias: float = 0.0) -> np.ndarray:
        """Orthogonal weights; the discrete head's output bias can carry a
        prior toward running blocks early (deferring until the deadline mask
        fires is a poor local optimum that per-step credit barely escapes)."""
        net = orthogonal_init(self.manifest, rng)
        if on_bias != 0.0 and self.n_disc:
            w1 = self.manifest.offsets[-1][1]
            net[w1 + self.n_cont:w1 + self.n_cont + self.n_disc] = on_bias
        return np.concatenate([net, np.full(self.n_cont, log_std_init)])

    def split(self, params: np.ndarray):
        return params[: self.manifest.n_params], params[self.manifest.n_params:]

    def dist(self, params: np.ndarray, obs: np.ndarray, want_cache: bool = False):
        net, log_std = self.split(params)
        if want_cache:
            out, cache = forward(net, self.manifest, obs, want_cache=True)
        else:
            out = forward(net, self.manifest, obs)
        d = PolicyDistribution(
            mean=out[:, : self.n_cont],
            log_std=np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX),
            on_logit=out[:, self.n_cont:],
        )
        return (d, cache) if want_cache else d

    def sample(self, params: np.ndarray, obs: np.ndarray, mask: np.ndarray,
               forced: np.ndarray, rng: np.random.Generator):
        """Draw (u, o); forced dims take the forced value with zero log-prob."""
        d = self.dist(params, np.atleast_2d(obs))
        u = d.mean + d.std * rng.standard_normal(d.mean.shape)
        o = (rng.uniform(size=d.on_logit.shape) < d.on_prob).astype(int)
        mask2 = np.atleast_2d(mask)
        o = np.where(mask2, np.atleast_2d(forced), o)
        lp = log_prob(d, u, o, mask2)
        return u[0], o[0], float(lp[0])

    def greedy(self, params: np.ndarray, obs: np.ndarray, mask: np.ndarray,
               forced: np.ndarray):
        """Deterministic action: mean for continuous, argmax for discrete."""
        d = self.dist(params, np.atleast_2d(obs))
        u = d.mean[0]
        o = (d.on_logit[0] > 0.0).astype(int)
        o = np.where(np.asarray(mask, bool), forced, o)
        return u, o

    def log_probs(self, params: np.ndarray, obs: np.ndarray, u: np.ndarray,
                  o: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return log_prob(self.dist(params, obs), u, o, mask)

    def weighted_logprob_grad(self, params: np.ndarray, obs: np.ndarray,
                              u: np.ndarray, o: np.ndarray, mask: np.ndarray,
                              weights: np.ndarray) -> np.ndarray:
        """Exact gradient of sum_t weights_t * log pi(a_t | s_t)."""
        d, cache = self.dist(params, obs, want_cache=True)
        std = d.std
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        d_mean = w * (u - d.mean) / std**2
        q = d.on_prob
        d_logit = w * (o - q) * (~np.asarray(mask, bool))
        net, _ = self.split(params)
        g_net = backward(net, self.manifest, cache,
                         np.concatenate([d_mean, d_logit], axis=1))
        g_logstd = np.sum(w * (((u - d.mean) / std) ** 2 - 1.0), axis=0)
        g = np.concatenate([g_net, g_logstd])
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite policy gradient")
        return g

    def fisher_vector_product(self, params: np.ndarray, obs: np.ndarray,
                              mask: np.ndarray, v: np.ndarray,
                              damping: float = 0.0) -> np.ndarray:
        """Hessian of the batch-mean KL(old || new) at new=old, applied to v.

        At equality the Hessian reduces to the Gauss-Newton form
        J^T diag(fisher) J with a diagonal output-space metric: 1/sigma^2 for
        means, q(1-q) for unmasked logits, and 2 for each log-std dim.
        """
        d = self.dist(params, obs)
        b = d.mean.shape[0]
        v_net, v_logstd = self.split(np.asarray(v, dtype=float))
        net, _ = self.split(params)
        dy = jvp(net, self.manifest, obs, v_net)
        std = d.std
        q = d.on_prob
        w_mean = dy[:, : self.n_cont] / std**2
        w_logit = dy[:, self.n_cont:] * q * (1.0 - q) * (~np.asarray(mask, bool))
        _, cache = forward(net, self.manifest, obs, want_cache=True)
        hv_net = backward(net, self.manifest, cache,
                          np.concatenate([w_mean, w_logit], axis=1)) / b
        hv_logstd = 2.0 * v_logstd
        return np.concatenate([hv_net, hv_logstd]) + damping * np.asarray(v, dtype=float)

    def kl_and_grad(self, old: PolicyDistribution, params: np.ndarray,
                    obs: np.ndarray, mask: np.ndarray):
        """Mean KL(old || pi_params) and its exact gradient w.r.t. params."""
        d, cache = self.dist(params, obs, want_cache=True)
        kl = kl_divergence(old, d, mask)
        b = d.mean.shape[0]
        sq, sp = d.std, old.std
        dmu = d.mean - old.mean
        d_mean = dmu / sq**2 / b
        qn = d.on_prob
        qo = old.on_prob
        d_logit = (qn - qo) * (~np.asarray(mask, bool)) / b
        net, _ = self.split(params)
        g_net = backward(net, self.manifest, cache,
                         np.concatenate([d_mean, d_logit], axis=1))
        g_logstd = np.sum((1.0 - (sp**2 + dmu**2) / sq**2) / b, axis=0)
        return kl, np.concatenate([g_net, g_logstd])


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = "gridflex-ckpt"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, sections: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned checkpoint: one-line JSON header + raw little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "sections": [{"name": k, "size": int(v.size)} for k, v in sections.items()],
        "meta": meta or {},
    }
    with path.open("wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        for v in sections.values():
            f.write(np.asarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with path.open("rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a gridflex checkpoint")
        if header.get("version") != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        sections = {}
        for sec in header["sections"]:
            raw = f.read(8 * sec["size"])
            sections[sec["name"]] = np.frombuffer(raw, dtype="<f8").copy()
    return sections, header.get("meta", {})
