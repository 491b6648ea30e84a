"""Stage 1: the text embedding synthesizer.

A single linear layer maps each frozen visual joint embedding to ``k``
pseudo tokens; the frozen text encoder turns those tokens into a pseudo text
embedding. Training minimises the symmetric align loss over the batch plus
the distill loss towards real class-name embeddings on the labeled subset,
both evaluated on two augmented views.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_payloads, check_semi_labels, cosine_lr_lambda, torch_generator
from .data import UNLABELED, UniformNoiseAugment, iter_epoch_batches
from .exceptions import InvalidStateError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tes-checkpoint/1"


def align_loss(z_v, z_t, tau_a):
    """Symmetric InfoNCE between visual and pseudo text embeddings.

    Both directions normalise over the whole batch, positive included.
    """
    if z_v.shape[0] == 0:
        raise ValueError("align_loss needs a non-empty batch")
    if z_v.shape != z_t.shape:
        raise ValueError(f"shape mismatch {tuple(z_v.shape)} vs {tuple(z_t.shape)}")
    sim = z_v @ z_t.T / tau_a
    pos = sim.diagonal()
    loss_v = (torch.logsumexp(sim, dim=1) - pos).mean()
    loss_t = (torch.logsumexp(sim, dim=0) - pos).mean()
    return loss_v + loss_t


def distill_loss(z_t, table, class_index, include_positive=False):
    """Cross-entropy plus squared error towards the real class-name embeddings.

    ``table`` is a ``(|Y_l|, dim)`` tensor (or :class:`ClassTextTable`).
    By default the cross-entropy denominator runs over the *other* known
    classes only and carries no temperature, so the value can be negative.
    """
    T = getattr(table, "embeddings", table)
    class_index = torch.as_tensor(class_index, dtype=torch.long)
    if T.shape[0] < 2 and not include_positive:
        raise InvalidStateError("distill loss needs at least two known classes")
    if z_t.shape[0] == 0:
        raise ValueError("distill_loss needs at least one labeled row")
    logits = z_t @ T.T
    pos = logits.gather(1, class_index[:, None]).squeeze(1)
    if include_positive:
        denom = torch.logsumexp(logits, dim=1)
    else:
        mask = torch.zeros_like(logits, dtype=torch.bool)
        mask[torch.arange(len(class_index)), class_index] = True
        denom = torch.logsumexp(logits.masked_fill(mask, float("-inf")), dim=1)
    ce = (denom - pos).mean()
    mse = ((z_t - T[class_index]) ** 2).sum(dim=1).mean()
    return ce + mse


class TextEmbeddingSynthesizer(TransformerMixin, BaseEstimator):
    """Learn pseudo text embeddings for images without class names.

    Parameters
    ----------
    encoders : encoder backend
        Frozen image and text encoders (see :mod:`mmgcd.encoders`).
    class_names : sequence of str, optional
        ``class_names[c]`` names class id ``c``; defaults to the backend's
        own names when it has them.
    token_count : int
        Number of pseudo tokens per image.
    tau_a : float
        Align-loss temperature.
    view_noise : float
        Radius of the additive uniform augmentation applied to each view.

    ``fit(X, y)`` takes payloads and semi-supervised targets (``-1`` for
    unlabeled). ``transform(X)`` returns unit-norm pseudo text embeddings.
    """

    def __init__(self, encoders=None, class_names=None, token_count=7, tau_a=0.01,
                 epochs=200, batch_size=128, learning_rate=0.1, momentum=0.9,
                 weight_decay=0.0, view_noise=0.0, distill_include_positive=False,
                 seed=0, verbose=False):
        self.encoders = encoders
        self.class_names = class_names
        self.token_count = token_count
        self.tau_a = tau_a
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.view_noise = view_noise
        self.distill_include_positive = distill_include_positive
        self.seed = seed
        self.verbose = verbose

    # -- model pieces ---------------------------------------------------

    def _init_layer(self):
        enc = self.encoders
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        if self.tau_a <= 0:
            raise ValueError("tau_a must be positive")
        if self.token_count > enc.max_tokens:
            raise ValueError(f"token_count={self.token_count} exceeds max_tokens={enc.max_tokens}")
        gen = torch_generator(self.seed)
        layer = nn.Linear(enc.joint_dim, self.token_count * enc.token_dim).to(enc.dtype)
        bound = 1.0 / enc.joint_dim ** 0.5
        with torch.no_grad():
            layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
            layer.bias.zero_()
        return layer

    def project_to_tokens(self, z_v):
        """Map ``(n, joint_dim)`` visual embeddings to ``(n, k, token_dim)`` tokens."""
        check_is_fitted(self, "layer_")
        z_v = torch.as_tensor(z_v, dtype=self.encoders.dtype)
        if z_v.ndim != 2 or z_v.shape[1] != self.layer_.in_features:
            raise ValueError(f"expected (n, {self.layer_.in_features}) embeddings, got {tuple(z_v.shape)}")
        return self.layer_(z_v).reshape(z_v.shape[0], self.token_count, self.encoders.token_dim)

    def synthesize(self, z_v):
        """Pseudo text embeddings for visual embeddings (differentiable in the layer)."""
        return self.encoders.encode_pseudo_tokens(self.project_to_tokens(z_v))

    def embed(self, X):
        """Frozen visual joint embeddings and pseudo text embeddings, no augmentation."""
        check_is_fitted(self, "layer_")
        _, z_v = self.encoders.encode_images(check_payloads(X))
        with torch.no_grad():
            z_t = self.synthesize(z_v)
        return z_v, z_t

    def transform(self, X):
        return self.embed(X)[1].detach().cpu().numpy()

    @property
    def weight_(self):
        return self.layer_.weight.detach().cpu().numpy().astype(np.float64)

    @property
    def bias_(self):
        return self.layer_.bias.detach().cpu().numpy().astype(np.float64)

    # -- training -------------------------------------------------------

    def _names(self):
        if self.class_names is not None:
            return self.class_names
        oracle = getattr(self.encoders, "oracle", None)
        if oracle is None:
            raise ValueError("class_names is required for this encoder backend")
        return oracle.class_names

    def fit(self, X, y=None):
        if self.encoders is None:
            raise ValueError("encoders must be provided")
        X = check_payloads(X)
        n = len(X)
        y = np.full(n, UNLABELED) if y is None else check_semi_labels(y, n)
        labeled = y != UNLABELED
        old = sorted(int(c) for c in np.unique(y[labeled]))
        names = self._names()
        self.old_classes_ = old
        self.text_table_ = self.encoders.encode_class_names([names[c] for c in old]) if old else None
        position = {c: i for i, c in enumerate(old)}
        class_index = np.array([position.get(int(c), -1) for c in y])
        use_distill = bool(old)
        if not use_distill:
            warnings.warn("no labeled instances: training TES with the align loss only", RuntimeWarning)
        elif len(old) < 2 and not self.distill_include_positive:
            raise InvalidStateError("distill loss needs at least two labeled classes")

        self.layer_ = self._init_layer()
        self.history_ = []
        self.n_epochs_trained_ = 0
        encoder_state = self.encoders.state_snapshot()
        if self.epochs < 1:
            warnings.warn("epochs < 1: returning the initialised synthesizer", RuntimeWarning)
            return self

        rng = np.random.default_rng(self.seed)
        augment = UniformNoiseAugment(self.view_noise)
        steps_per_epoch = max(1, len(list(iter_epoch_batches(n, self.batch_size, np.random.default_rng(0)))))
        opt = torch.optim.SGD(self.layer_.parameters(), lr=self.learning_rate,
                              momentum=self.momentum, weight_decay=self.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_lr_lambda(self.epochs * steps_per_epoch))
        T = self.text_table_.embeddings if use_distill else None

        for epoch in range(self.epochs):
            sums = {"align": 0.0, "distill": 0.0, "total": 0.0}
            steps = 0
            for idx in iter_epoch_batches(n, self.batch_size, rng):
                views = [augment(X[idx], rng), augment(X[idx], rng)]
                align, distill = self.batch_loss(views, class_index[idx], T)
                loss = align + distill
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                sums["align"] += float(align.detach()) if torch.is_tensor(align) else align
                sums["distill"] += float(distill.detach()) if torch.is_tensor(distill) else distill
                sums["total"] += float(loss.detach())
                steps += 1
            record = {k: v / max(steps, 1) for k, v in sums.items()}
            record["epoch"] = epoch
            record["lr"] = opt.param_groups[0]["lr"]
            self.history_.append(record)
            if self.verbose:
                logger.info("tes epoch %d align %.4f distill %.4f", epoch, record["align"], record["distill"])
            self.n_epochs_trained_ = epoch + 1

        after = self.encoders.state_snapshot()
        if any(not torch.equal(encoder_state[k], after[k]) for k in encoder_state):
            raise InvalidStateError("frozen encoder parameters changed during TES training")
        return self

    def batch_loss(self, views, class_index, table=None):
        """``(align, distill)`` averaged over the views of one batch.

        ``class_index`` holds each row's position in ``table`` (``-1`` for
        unlabeled rows); with no table or no labeled row the distill part is 0.
        """
        class_index = np.asarray(class_index)
        lab = class_index >= 0
        align = distill = 0.0
        for view in views:
            _, z_v = self.encoders.encode_images(view)
            z_t = self.synthesize(z_v)
            align = align + align_loss(z_v, z_t, self.tau_a) / len(views)
            if table is not None and lab.any():
                distill = distill + distill_loss(
                    z_t[torch.as_tensor(lab)], table, class_index[lab],
                    include_positive=self.distill_include_positive) / len(views)
        return align, distill

    # -- checkpoint -----------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "layer_")
        enc = self.encoders
        try:
            np.savez(
                path,
                format=np.array(CHECKPOINT_FORMAT),
                dims=np.array([enc.joint_dim, self.token_count, enc.token_dim], dtype=np.int64),
                weight=self.weight_,
                bias=self.bias_,
                tau_a=np.float64(self.tau_a),
                seed=np.int64(self.seed),
                epochs=np.int64(self.n_epochs_trained_),
                old_classes=np.array(self.old_classes_, dtype=np.int64),
            )
        except OSError as exc:
            raise OSError(f"cannot write TES checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path, encoders, **params):
        try:
            data = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise InvalidStateError(f"cannot read TES checkpoint {path}: {exc}") from exc
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a TES checkpoint")
        joint_dim, k, token_dim = (int(v) for v in data["dims"])
        if (joint_dim, token_dim) != (encoders.joint_dim, encoders.token_dim):
            raise ValueError("checkpoint dimensions do not match the encoder backend")
        est = cls(encoders=encoders, token_count=k, tau_a=float(data["tau_a"]),
                  seed=int(data["seed"]), **params)
        est.layer_ = nn.Linear(joint_dim, k * token_dim).to(encoders.dtype)
        with torch.no_grad():
            est.layer_.weight.copy_(torch.from_numpy(data["weight"]))
            est.layer_.bias.copy_(torch.from_numpy(data["bias"]))
        est.n_epochs_trained_ = int(data["epochs"])
        est.old_classes_ = [int(c) for c in data["old_classes"]]
        est.history_ = []
        return est


def train_tes(dataset, split, encoders, **params):
    """Fit a :class:`TextEmbeddingSynthesizer` on a dataset/split pair."""
    from .data import split_arrays

    X, y_semi, _, _ = split_arrays(dataset, split)
    return TextEmbeddingSynthesizer(encoders=encoders, **params).fit(X, y_semi)
