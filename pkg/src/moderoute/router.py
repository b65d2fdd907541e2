"""Mind Router: question text -> thinking mode.

The reference classifier is multinomial logistic regression over signed,
hashed character n-grams, trained by mini-batch gradient descent on the
mean cross-entropy of the density-optimal labels (plus an L2 penalty).
Both pieces follow the scikit-learn estimator protocol, so they drop into
pipelines, ``clone`` and grid search.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.utils.validation import check_is_fitted

from .errors import InputError, LoadError, ParseError
from .modes import MODES, ThinkingMode

__all__ = [
    "FeaturizerConfig",
    "TrainConfig",
    "HashedCharFeaturizer",
    "MindRouter",
    "ModeClassifier",
    "loss_and_grad",
    "softmax",
    "train",
    "load",
    "save",
    "ROUTER_FORMAT",
    "ROUTER_VERSION",
]

ROUTER_FORMAT = "moderoute-router"
ROUTER_VERSION = 1
CANONICAL_ORDER = tuple(m.value for m in MODES)


class ModeClassifier(Protocol):
    """What dispatch and the HTTP service need from a router."""

    def predict_mode(self, text: str) -> tuple[ThinkingMode, tuple[float, float, float]]: ...


@dataclass(frozen=True)
class FeaturizerConfig:
    ngram_min: int = 3
    ngram_max: int = 5
    hash_dimension: int = 2**18
    lowercase: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.5
    l2_lambda: float = 1e-4
    seed: int = 0
    shuffle: bool = True


def _validate_texts(X: Any) -> list[str]:
    if isinstance(X, (str, bytes)):
        raise InputError("expected an iterable of strings, got a single string")
    texts = list(X)
    for i, text in enumerate(texts):
        if not isinstance(text, str):
            raise InputError(f"sample {i} is {type(text).__name__}, expected str")
    return texts


def _strip(text: str) -> str:
    return text.strip()


def _strip_lower(text: str) -> str:
    return text.strip().lower()


class HashedCharFeaturizer(TransformerMixin, BaseEstimator):
    """Signed hashing of character n-grams, L2-normalized per row.

    Stateless: ``fit`` only validates parameters. Leading and trailing
    whitespace is ignored; text is lowercased unless ``lowercase=False``.
    Empty text maps to the zero vector.
    """

    def __init__(self, ngram_min: int = 3, ngram_max: int = 5, hash_dimension: int = 2**18, lowercase: bool = True):
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self.hash_dimension = hash_dimension
        self.lowercase = lowercase

    def _vectorizer(self) -> HashingVectorizer:
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise InputError(f"need 1 <= ngram_min <= ngram_max, got ({self.ngram_min}, {self.ngram_max})")
        dim = self.hash_dimension
        if dim < 2 or dim & (dim - 1):
            raise InputError(f"hash_dimension must be a power of two >= 2, got {dim}")
        return HashingVectorizer(
            analyzer="char",
            ngram_range=(self.ngram_min, self.ngram_max),
            n_features=dim,
            alternate_sign=True,
            norm="l2",
            preprocessor=_strip_lower if self.lowercase else _strip,
            dtype=np.float64,
        )

    def fit(self, X=None, y=None):
        self._vectorizer()
        return self

    def transform(self, X) -> sp.csr_matrix:
        return self._vectorizer().transform(_validate_texts(X)).tocsr()

    def config(self) -> FeaturizerConfig:
        return FeaturizerConfig(self.ngram_min, self.ngram_max, self.hash_dimension, self.lowercase)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _data_term(
    weights: np.ndarray, bias: np.ndarray, features: sp.csr_matrix, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean cross-entropy restricted to the feature columns the batch uses.

    Returns ``(loss, columns, grad_weights[:, columns], grad_bias)``.
    """
    n = features.shape[0]
    columns = np.unique(features.indices)
    local = features[:, columns] if columns.size else features[:, :0]
    logits = np.asarray(local @ weights[:, columns].T) + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float((log_norm - shifted[rows, labels]).mean())
    residual = np.exp(shifted - log_norm[:, None])
    residual[rows, labels] -= 1.0
    grad_local = np.asarray((local.T @ residual).T) / n
    return loss, columns, grad_local, residual.mean(axis=0)


def loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: sp.spmatrix | np.ndarray,
    labels: np.ndarray,
    l2_lambda: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2_lambda * ||W||^2 / 2`` and its exact gradient.

    ``weights`` is (n_classes, n_features), ``labels`` holds class indices.
    Returns ``(loss, grad_weights, grad_bias)``.
    """
    if features.shape[0] == 0:
        raise InputError("loss over an empty batch is undefined")
    features = sp.csr_matrix(features)
    labels = np.asarray(labels, dtype=np.intp)
    loss, columns, grad_local, grad_b = _data_term(weights, bias, features, labels)
    grad_w = l2_lambda * weights if l2_lambda else np.zeros_like(weights)
    grad_w[:, columns] += grad_local
    loss += 0.5 * l2_lambda * float(np.sum(weights * weights))
    return loss, grad_w, grad_b


def _labels_to_index(y: Iterable[Any], class_order: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(class_order)}
    out = []
    for value in y:
        name = value.value if isinstance(value, ThinkingMode) else str(value).strip().lower()
        if name not in index:
            raise ParseError(f"unknown mode label {value!r}")
        out.append(index[name])
    return np.asarray(out, dtype=np.intp)


class MindRouter(ClassifierMixin, BaseEstimator):
    """Three-way linear router trained from zero initialization.

    Parameters mirror :class:`FeaturizerConfig` and :class:`TrainConfig`.
    ``class_order`` fixes the row order of ``coef_``; ties in prediction go
    to the cheapest tied mode whatever the order. ``n_jobs > 1`` splits each
    mini-batch into fixed contiguous shards whose gradients are summed in
    shard order, so results stay deterministic for a given ``n_jobs``.

    Attributes after ``fit``: ``coef_``, ``intercept_``, ``classes_``,
    ``loss_curve_`` (full-data objective after each epoch) and
    ``training_meta_``.
    """

    def __init__(
        self,
        ngram_min: int = 3,
        ngram_max: int = 5,
        hash_dimension: int = 2**18,
        lowercase: bool = True,
        epochs: int = 50,
        batch_size: int = 32,
        learning_rate: float = 0.5,
        l2_lambda: float = 1e-4,
        seed: int = 0,
        shuffle: bool = True,
        class_order: tuple[str, ...] = CANONICAL_ORDER,
        n_jobs: int = 1,
    ):
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self.hash_dimension = hash_dimension
        self.lowercase = lowercase
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2_lambda = l2_lambda
        self.seed = seed
        self.shuffle = shuffle
        self.class_order = class_order
        self.n_jobs = n_jobs

    @classmethod
    def from_configs(cls, tcfg: TrainConfig | None = None, fcfg: FeaturizerConfig | None = None, **kw) -> MindRouter:
        return cls(**asdict(fcfg or FeaturizerConfig()), **asdict(tcfg or TrainConfig()), **kw)

    @classmethod
    def zero(cls, fcfg: FeaturizerConfig | None = None) -> MindRouter:
        """An untrained router with all-zero weights (uniform probabilities)."""
        model = cls.from_configs(fcfg=fcfg)
        model._init_params()
        model.loss_curve_ = []
        model.training_meta_ = {"untrained": True}
        return model

    # -- internals -----------------------------------------------------------

    def featurizer(self) -> HashedCharFeaturizer:
        return HashedCharFeaturizer(self.ngram_min, self.ngram_max, self.hash_dimension, self.lowercase)

    def _check_params(self) -> None:
        order = tuple(self.class_order)
        if sorted(order) != sorted(CANONICAL_ORDER):
            raise InputError(f"class_order must be a permutation of {CANONICAL_ORDER}, got {order}")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not self.l2_lambda >= 0:
            raise InputError("l2_lambda must be >= 0")
        if self.n_jobs < 1:
            raise InputError("n_jobs must be >= 1")

    def _init_params(self) -> None:
        self._check_params()
        self.featurizer().fit()
        self.classes_ = np.asarray(self.class_order)
        self.coef_ = np.zeros((len(self.classes_), self.hash_dimension))
        self.intercept_ = np.zeros(len(self.classes_))

    def _step(self, X: sp.csr_matrix, y: np.ndarray, pool: ThreadPoolExecutor | None) -> None:
        """One gradient step on a mini-batch, touching only its active columns."""
        if pool is None or X.shape[0] < 2 * self.n_jobs:
            _, columns, grad_local, grad_b = _data_term(self.coef_, self.intercept_, X, y)
        else:
            n = X.shape[0]
            bounds = np.linspace(0, n, self.n_jobs + 1).astype(int)
            shards = [(X[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            parts = list(pool.map(lambda s: _data_term(self.coef_, self.intercept_, *s), shards))
            columns = np.unique(X.indices)
            grad_local = np.zeros((self.coef_.shape[0], columns.size))
            grad_b = np.zeros_like(self.intercept_)
            for (_, cols, g_local, g_b), (Xs, _) in zip(parts, shards):
                weight = Xs.shape[0] / n
                grad_local[:, np.searchsorted(columns, cols)] += weight * g_local
                grad_b += weight * g_b
        if self.l2_lambda:
            # W - lr * (g + l2 * W) == W * (1 - lr * l2) - lr * g
            self.coef_ *= 1.0 - self.learning_rate * self.l2_lambda
        self.coef_[:, columns] -= self.learning_rate * grad_local
        self.intercept_ -= self.learning_rate * grad_b

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y, source_digest: str | None = None) -> MindRouter:
        texts = _validate_texts(X)
        labels = _labels_to_index(y, tuple(self.class_order))
        if len(texts) != len(labels):
            raise InputError(f"{len(texts)} texts but {len(labels)} labels")
        if not texts:
            raise InputError("cannot train on an empty dataset")
        self._init_params()
        features = self.featurizer().transform(texts)
        rng = np.random.default_rng(self.seed)
        n = len(texts)
        self.loss_curve_ = []
        pool = ThreadPoolExecutor(self.n_jobs) if self.n_jobs > 1 else None
        try:
            for _ in range(self.epochs):
                order = rng.permutation(n) if self.shuffle else np.arange(n)
                for start in range(0, n, self.batch_size):
                    idx = order[start : start + self.batch_size]
                    self._step(features[idx], labels[idx], pool)
                loss, _, _ = loss_and_grad(self.coef_, self.intercept_, features, labels, self.l2_lambda)
                self.loss_curve_.append(loss)
        finally:
            if pool is not None:
                pool.shutdown()
        if not (np.all(np.isfinite(self.coef_)) and np.all(np.isfinite(self.intercept_))):
            raise InputError("training diverged; lower learning_rate")
        self.training_meta_ = {
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "l2_lambda": self.l2_lambda,
            "n_examples": n,
            "final_loss": self.loss_curve_[-1],
            "source_log_digest": source_digest,
        }
        return self

    def loss_and_grad(self, texts: Sequence[str], labels: Sequence[Any]):
        """Objective and gradient at the current parameters for a labeled batch."""
        check_is_fitted(self, "coef_")
        texts = _validate_texts(texts)
        if not texts:
            raise InputError("loss over an empty batch is undefined")
        y = _labels_to_index(labels, tuple(self.class_order))
        return loss_and_grad(self.coef_, self.intercept_, self.featurizer().transform(texts), y, self.l2_lambda)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        features = self.featurizer().transform(X)
        return np.asarray(features @ self.coef_.T) + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, columns in ``classes_`` order."""
        return softmax(self.decision_function(X))

    def _pick(self, proba: np.ndarray) -> np.ndarray:
        ranks = np.array([ThinkingMode(c).rank for c in self.classes_])
        top = proba.max(axis=1, keepdims=True)
        # among exact ties, the cheapest mode wins
        masked = np.where(proba == top, ranks, len(ranks))
        return masked.argmin(axis=1)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[self._pick(proba)]

    def predict_mode(self, text: str) -> tuple[ThinkingMode, tuple[float, float, float]]:
        """Routed mode and probabilities in canonical (fast, normal, slow) order."""
        proba = self.predict_proba([text])
        mode = ThinkingMode(self.classes_[self._pick(proba)[0]])
        lookup = dict(zip(self.classes_, proba[0]))
        return mode, tuple(float(lookup[c]) for c in CANONICAL_ORDER)

    # -- persistence -----------------------------------------------------------

    def model_digest(self) -> str:
        check_is_fitted(self, "coef_")
        h = hashlib.sha256()
        h.update(json.dumps(self.get_params(), sort_keys=True, default=list).encode())
        h.update(np.ascontiguousarray(self.coef_, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.intercept_, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> str:
        """Write the model; returns its digest."""
        check_is_fitted(self, "coef_")
        digest = self.model_digest()
        meta = {
            "format": ROUTER_FORMAT,
            "format_version": ROUTER_VERSION,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "classes": [str(c) for c in self.classes_],
            "training_meta": self.training_meta_,
            "loss_curve": list(self.loss_curve_),
            "digest": digest,
        }
        buffer = io.BytesIO()
        np.savez_compressed(
            buffer,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
            coef=self.coef_.astype("<f8"),
            intercept=self.intercept_.astype("<f8"),
        )
        Path(path).write_bytes(buffer.getvalue())
        return digest

    @classmethod
    def load(cls, path: str | Path) -> MindRouter:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise LoadError(f"cannot read model file {path}: {exc}") from None
        try:
            with np.load(io.BytesIO(raw), allow_pickle=False) as archive:
                meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
                coef = np.array(archive["coef"], dtype=np.float64)
                intercept = np.array(archive["intercept"], dtype=np.float64)
        except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
            raise LoadError(f"model file {path} is corrupt: {exc}") from None
        if meta.get("format") != ROUTER_FORMAT:
            raise LoadError(f"{path} is not a router model file")
        if meta.get("format_version") != ROUTER_VERSION:
            raise LoadError(f"model format version {meta.get('format_version')!r} is not supported (need {ROUTER_VERSION})")
        params = dict(meta["params"])
        params["class_order"] = tuple(params["class_order"])
        model = cls(**params)
        model.classes_ = np.asarray(meta["classes"])
        model.coef_ = coef
        model.intercept_ = intercept
        model.training_meta_ = meta.get("training_meta", {})
        model.loss_curve_ = meta.get("loss_curve", [])
        if coef.shape != (3, model.hash_dimension) or intercept.shape != (3,):
            raise LoadError(f"model file {path} has inconsistent array shapes")
        if model.model_digest() != meta.get("digest"):
            raise LoadError(f"model file {path} failed its integrity check")
        return model


def train(
    texts: Sequence[str],
    labels: Sequence[Any],
    tcfg: TrainConfig | None = None,
    fcfg: FeaturizerConfig | None = None,
    source_digest: str | None = None,
) -> MindRouter:
    return MindRouter.from_configs(tcfg, fcfg).fit(texts, labels, source_digest=source_digest)


def save(model: MindRouter, path: str | Path) -> str:
    return model.save(path)


def load(path: str | Path) -> MindRouter:
    return MindRouter.load(path)
