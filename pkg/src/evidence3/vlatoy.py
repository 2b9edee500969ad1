"""Desk-scale action-prediction experiment.

A two-layer perceptron stands in for a vision-language-action backbone. It
reads block-mean image features, optionally concatenated with the detector's
cue (three metric values plus three flags), and has two heads:

* an action head predicting the current and next 7-D action (L1 loss),
* an explanation head classifying which transforms were applied (softmax
  cross-entropy), weighted by ``lambda_xai`` in the total loss.

Three training configurations are compared on a fully perturbed evaluation
set: ``default`` (clean data only), ``augmented`` (clean and perturbed data)
and ``proposed`` (augmented data, cue input, joint explanation loss).
"""

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from threadpoolctl import threadpool_limits

from ._parallel import pmap
from .evidence import Evidence3Detector, MetricParams, detect
from .exceptions import EvaluationError, TrainingError
from .explain import N_CLASSES, explanation_class, render_cue
from .perturb import CLEAN, PerturbationSpec, SamplerConfig, apply_perturbation, mix_seed, sample_spec
from .scene import SIZE, draw_layout, render

ACTION_DIM = 7
BLOCK = 8
N_IMAGE_FEATURES = 3 * (SIZE // BLOCK) ** 2
N_CUE_FEATURES = 6
N_FEATURES = N_IMAGE_FEATURES + N_CUE_FEATURES
MODES = ("default", "augmented", "proposed")

INSTRUCTION = "pick up the ripe fruit"

# published full-scale figures (7B-class backbone, simulator data), echoed in reports
PUBLISHED_REFERENCE = {
    "default": {"xai_acc": None, "current_l1": 0.0826, "next_l1": 0.0788},
    "augmented": {"xai_acc": None, "current_l1": 0.0695, "next_l1": 0.0697},
    "proposed": {"xai_acc": 0.9977, "current_l1": 0.0647, "next_l1": 0.0643},
    "current_l1_reduction_vs_default": {"abstract": 0.217, "results": 0.216},
    "next_l1_reduction_vs_default": 0.184,
}


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    instruction: str
    action_now: np.ndarray
    action_next: np.ndarray
    spec: PerturbationSpec
    xai_class: int

    @property
    def target(self):
        return np.concatenate([self.action_now, self.action_next])


def actions_for(cx, cy, size=SIZE):
    """Current and next action for a target centred at pixel ``(cx, cy)``."""
    now = np.array([cx / size, cy / size, 0.5, 0.5, 0.5, 0.5, 1.0])
    nxt = now.copy()
    nxt[:2] += 0.1 * (0.5 - now[:2])
    nxt[6] = 0.0
    return now, nxt


def gen_sample(scene_seed, cfg=SamplerConfig(), perturbed=False):
    """Render one scene; if ``perturbed``, apply a random nonempty perturbation."""
    layout = draw_layout(np.random.default_rng(int(scene_seed)))
    image = render(layout)
    spec = CLEAN
    if perturbed:
        spec = sample_spec(replace(cfg, p_clean=0.0), mix_seed(scene_seed, 1))
        image = apply_perturbation(image, spec)
    now, nxt = actions_for(layout.cx, layout.cy)
    return Sample(image, INSTRUCTION, now, nxt, spec, explanation_class(spec))


def block_means(img, block=BLOCK):
    h, w, _ = img.shape
    return img.reshape(h // block, block, w // block, block, 3).mean(axis=(1, 3))


def featurize(s, stats=None, thr=None, use_cue=False, params=MetricParams()):
    """198-vector: per-channel 8x8 block means, then the 6 cue values.

    The cue part is three metric values and three 0/1 flags when
    ``use_cue`` is set, and zeros otherwise.
    """
    img = s.image if isinstance(s, Sample) else np.asarray(s, dtype=np.float64)
    feats = np.zeros(N_FEATURES)
    feats[:N_IMAGE_FEATURES] = block_means(img).transpose(2, 0, 1).ravel()
    if use_cue:
        rep = detect(img, stats, thr, params)
        feats[N_IMAGE_FEATURES:N_IMAGE_FEATURES + 3] = rep.metrics
        feats[N_IMAGE_FEATURES + 3:] = rep.flags
    return feats


def cued_instruction(s, stats, thr, params=MetricParams()):
    return f"{s.instruction} {render_cue(detect(s.image, stats, thr, params))}"


# ---------------------------------------------------------------------------
# losses


def l1_action_loss(pred, target):
    """Mean absolute error over the current (0..6) and next (7..13) halves."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    err = np.abs(pred - target)
    return float(err[..., :ACTION_DIM].mean()), float(err[..., ACTION_DIM:].mean())


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def xai_ce_loss(logits, cls):
    """Softmax cross-entropy (natural log) of one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(cls) < logits.shape[-1]:
        raise ValueError(f"class {cls} out of range")
    return float(-log_softmax(logits)[int(cls)])


def total_loss(l_act, l_xai, lambda_xai):
    return lambda_xai * l_xai + l_act


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class TrainConfig:
    lambda_xai: float = 0.5
    lr: float = 0.2
    epochs: int = 300
    batch: int = 32
    seed: int = 0
    mode: str = "proposed"
    hidden: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_xai < 0:
            raise ValueError("lambda_xai must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch < 1 or self.hidden < 1:
            raise ValueError("epochs >= 0, batch >= 1 and hidden >= 1 required")

    @property
    def use_cue(self):
        return self.mode == "proposed"

    @property
    def effective_lambda(self):
        return self.lambda_xai if self.mode == "proposed" else 0.0

    def to_dict(self):
        return asdict(self)


def glorot_uniform(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def forward(params, X):
    """Hidden activations, action predictions and explanation logits."""
    H = np.tanh(X @ params["W1"] + params["b1"])
    return H, H @ params["Wa"] + params["ba"], H @ params["Wx"] + params["bx"]


def batch_loss(params, X, T, y, lambda_xai):
    """Total loss on a batch and its parts ``(total, current, next, xai)``."""
    _, A, L = forward(params, X)
    cur, nxt = l1_action_loss(A, T)
    ce = float(-log_softmax(L)[np.arange(len(y)), y].mean())
    return total_loss(cur + nxt, ce, lambda_xai), cur, nxt, ce


def batch_gradients(params, X, T, y, lambda_xai):
    """Analytic gradient of :func:`batch_loss` for every parameter array."""
    n = X.shape[0]
    H, A, L = forward(params, X)
    dA = np.sign(A - T) / (ACTION_DIM * n)
    dL = np.exp(log_softmax(L))
    dL[np.arange(n), y] -= 1.0
    dL *= lambda_xai / n
    dH = dA @ params["Wa"].T + dL @ params["Wx"].T
    dZ = dH * (1.0 - H * H)
    return {
        "W1": X.T @ dZ,
        "b1": dZ.sum(axis=0),
        "Wa": H.T @ dA,
        "ba": dA.sum(axis=0),
        "Wx": H.T @ dL,
        "bx": dL.sum(axis=0),
    }


class ActionPolicy(BaseEstimator):
    """Two-layer tanh perceptron with an action head and an explanation head.

    ``fit`` runs plain mini-batch gradient descent on
    ``lambda_xai * cross_entropy + (current_l1 + next_l1)``. Inputs are
    standardised with statistics of the training features.
    """

    def __init__(self, hidden=256, lambda_xai=0.5, lr=0.2, epochs=300, batch=32, seed=0,
                 lr_decay="linear"):
        self.hidden = hidden
        self.lambda_xai = lambda_xai
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.seed = seed
        self.lr_decay = lr_decay

    def step_size(self, step, total):
        """Learning rate at ``step``; ``"linear"`` anneals to zero over ``total`` steps."""
        if self.lr_decay == "linear":
            return self.lr * (1.0 - step / total)
        if self.lr_decay in (None, "none"):
            return self.lr
        raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def init_params(self, n_features):
        rng = np.random.default_rng(mix_seed(self.seed, 0))
        return {
            "W1": glorot_uniform(rng, n_features, self.hidden),
            "b1": np.zeros(self.hidden),
            "Wa": glorot_uniform(rng, self.hidden, 2 * ACTION_DIM),
            "ba": np.zeros(2 * ACTION_DIM),
            "Wx": glorot_uniform(rng, self.hidden, N_CLASSES),
            "bx": np.zeros(N_CLASSES),
        }

    def _scale(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean_) / self.x_scale_

    def fit(self, X, y, xai_class=None):
        """Train on features ``X`` (n, d), targets ``y`` (n, 14) and classes."""
        X = np.asarray(X, dtype=np.float64)
        T = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise TrainingError("training data must be a non-empty 2-D array")
        if T.shape != (X.shape[0], 2 * ACTION_DIM):
            raise TrainingError(f"targets must have shape ({X.shape[0]}, {2 * ACTION_DIM})")
        cls = np.zeros(X.shape[0], dtype=np.int64) if xai_class is None else np.asarray(xai_class, dtype=np.int64)

        self.x_mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_scale_ = np.where(std > 1e-12, std, 1.0)
        Xs = self._scale(X)

        params = self.init_params(X.shape[1])
        order_rng = np.random.default_rng(mix_seed(self.seed, 1))
        n = X.shape[0]
        total = self.epochs * math.ceil(n / self.batch)
        step = 0
        self.loss_curve_ = []
        # single BLAS thread keeps the parameter trajectory bit-reproducible
        with threadpool_limits(limits=1):
            for _ in range(self.epochs):
                perm = order_rng.permutation(n)
                for start in range(0, n, self.batch):
                    idx = perm[start:start + self.batch]
                    grads = batch_gradients(params, Xs[idx], T[idx], cls[idx], self.lambda_xai)
                    lr = self.step_size(step, total)
                    for k, g in grads.items():
                        params[k] -= lr * g
                    step += 1
                self.loss_curve_.append(batch_loss(params, Xs, T, cls, self.lambda_xai)[0])
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingError("training diverged (non-finite parameters)")
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def _forward(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("ActionPolicy is not fitted")
        with threadpool_limits(limits=1):
            return forward(self.params_, self._scale(X))

    def predict(self, X):
        """Predicted actions, shape ``(n, 14)``: current 7 then next 7."""
        return self._forward(X)[1]

    def decision_function(self, X):
        """Explanation logits, shape ``(n, 8)``."""
        return self._forward(X)[2]

    def predict_class(self, X):
        return self.decision_function(X).argmax(axis=1)


# ---------------------------------------------------------------------------
# training and evaluation on samples


def _design(data, detector, use_cue, n_jobs=None):
    if use_cue:
        params = detector.metric_params
        stats, thr = detector.stats_, detector.thresholds_
        rows = pmap(lambda s: featurize(s, stats, thr, True, params), data, n_jobs)
    else:
        rows = [featurize(s) for s in data]
    X = np.asarray(rows).reshape(len(data), N_FEATURES)
    T = np.asarray([s.target for s in data]).reshape(len(data), 2 * ACTION_DIM)
    y = np.asarray([s.xai_class for s in data], dtype=np.int64)
    return X, T, y


def select_training_data(data, mode):
    """``default`` keeps clean samples only; other modes keep everything."""
    if mode == "default":
        return [s for s in data if s.spec.is_clean]
    return list(data)


def train(data, cfg, detector=None, n_jobs=None):
    """Fit an :class:`ActionPolicy` on ``data`` following ``cfg.mode``."""
    subset = select_training_data(data, cfg.mode)
    if not subset:
        raise TrainingError(f"no training samples left for mode {cfg.mode!r}")
    if cfg.use_cue and detector is None:
        raise TrainingError("proposed mode needs a calibrated detector for the cue")
    X, T, y = _design(subset, detector, cfg.use_cue, n_jobs)
    model = ActionPolicy(cfg.hidden, cfg.effective_lambda, cfg.lr, cfg.epochs, cfg.batch, cfg.seed)
    return model.fit(X, T, y)


def evaluate(model, data, detector=None, use_cue=False, n_jobs=None):
    """Mean current-action L1, next-action L1 and explanation class accuracy."""
    if not data:
        raise EvaluationError("evaluation data must not be empty")
    X, T, y = _design(data, detector, use_cue, n_jobs)
    err = np.abs(model.predict(X) - T)
    cur = float(err[:, :ACTION_DIM].mean(axis=1).mean())
    nxt = float(err[:, ACTION_DIM:].mean(axis=1).mean())
    acc = float((model.predict_class(X) == y).mean())
    return cur, nxt, acc


# ---------------------------------------------------------------------------
# experiment


def make_corpus(seed, n, cfg, p_perturbed, n_jobs=None):
    """``n`` samples; each is perturbed with probability ``p_perturbed``."""

    def one(i):
        scene_seed = mix_seed(seed, i)
        perturbed = np.random.default_rng(mix_seed(scene_seed, 2)).random() < p_perturbed
        return gen_sample(scene_seed, cfg, perturbed)

    return pmap(one, range(n), n_jobs)


def run_experiment(exp_seed, sizes=(2000, 500), train_cfg=TrainConfig(), sampler=SamplerConfig(),
                   detector_params=None, n_jobs=None):
    """Train the three configurations and score them on perturbed data.

    Returns a dict with one row per mode: ``current_l1``, ``next_l1`` and
    ``xai_acc`` (``None`` for modes without an explanation head).
    """
    n_train, n_eval = sizes
    train_data = make_corpus(mix_seed(exp_seed, 0), n_train, sampler, 1.0 - sampler.p_clean, n_jobs)
    eval_data = make_corpus(mix_seed(exp_seed, 1), n_eval, sampler, 1.0, n_jobs)

    clean = [s.image for s in train_data if s.spec.is_clean]
    detector = Evidence3Detector(**(detector_params or {}), n_jobs=n_jobs).fit(clean)

    rows = {}
    for mode in MODES:
        cfg = replace(train_cfg, mode=mode, seed=mix_seed(exp_seed, 2))
        model = train(train_data, cfg, detector, n_jobs)
        cur, nxt, acc = evaluate(model, eval_data, detector, cfg.use_cue, n_jobs)
        rows[mode] = {
            "xai_acc": acc if cfg.effective_lambda > 0 else None,
            "current_l1": cur,
            "next_l1": nxt,
        }
    return {
        "seed": int(exp_seed),
        "n_train": n_train,
        "n_eval": n_eval,
        "n_train_clean": len(clean),
        "modes": rows,
    }


def merge_reports(per_seed, train_cfg=TrainConfig(), sampler=SamplerConfig()):
    """Average per-seed results into one experiment report."""
    modes = {}
    for mode in MODES:
        rows = [r["modes"][mode] for r in per_seed]
        accs = [r["xai_acc"] for r in rows if r["xai_acc"] is not None]
        modes[mode] = {
            "xai_acc": float(np.mean(accs)) if accs else None,
            "current_l1": float(np.mean([r["current_l1"] for r in rows])),
            "next_l1": float(np.mean([r["next_l1"] for r in rows])),
        }
    return {
        "seeds": [r["seed"] for r in per_seed],
        "modes": modes,
        "per_seed": per_seed,
        "paper_reference": PUBLISHED_REFERENCE,
        "config": {"train": train_cfg.to_dict(), "sampler": sampler.to_dict()},
    }


def run_experiments(seeds, sizes=(2000, 500), train_cfg=TrainConfig(), sampler=SamplerConfig(),
                    detector_params=None, n_jobs=None):
    per_seed = [run_experiment(s, sizes, train_cfg, sampler, detector_params, n_jobs) for s in seeds]
    return merge_reports(per_seed, train_cfg, sampler)
