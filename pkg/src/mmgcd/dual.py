"""Stage 2: dual-branch joint training.

The visual branch fine-tunes a copy of the image encoder's last block; the
text branch feeds frozen pseudo text embeddings through a learnable linear
projection. Both branches share one prototype classifier, each has its own
projector head for the contrastive losses, and the cross-modal consistency
term ties their anchor relationships together. Inference uses the visual
branch alone.
"""

from __future__ import annotations

import json
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import objectives as obj
from ._validation import check_payloads, check_semi_labels, cosine_lr_lambda, torch_generator
from .data import UNLABELED, Batch, UniformNoiseAugment, iter_epoch_batches
from .exceptions import InvalidStateError, TrainingDivergedError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dual-checkpoint/1"


class PrototypeClassifier(nn.Module):
    """Cosine classifier over ``K`` unit-norm prototypes."""

    def __init__(self, feature_dim, num_prototypes, generator=None):
        super().__init__()
        if num_prototypes < 1:
            raise InvalidStateError("classifier needs at least one prototype")
        w = torch.randn(num_prototypes, feature_dim, generator=generator)
        self.weight = nn.Parameter(F.normalize(w, dim=-1))

    def forward(self, x):
        return F.normalize(x, dim=-1) @ F.normalize(self.weight, dim=-1).T

    @torch.no_grad()
    def renormalize(self):
        self.weight.copy_(F.normalize(self.weight, dim=-1))


class Projector(nn.Module):
    """Two-layer MLP head producing unit-norm contrastive embeddings."""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, out_dim))

    def forward(self, x):
        return F.normalize(self.net(F.normalize(x, dim=-1)), dim=-1)


class DualModel(nn.Module):
    """Every trainable stage-2 parameter, grouped as in the optimisation list."""

    def __init__(self, encoders, num_classes, projection_dim=256, projector_hidden=256,
                 share_projector=False, finetune_projector=False, generator=None):
        super().__init__()
        self.finetune_projector = finetune_projector
        self.tail = encoders.make_trainable_tail()
        if finetune_projector:
            self.visual_proj = encoders.make_trainable_projector()
            feature_dim = encoders.joint_dim
        else:
            self.visual_proj = None
            feature_dim = encoders.backbone_dim
        self.feature_dim = feature_dim
        self.projector_v = Projector(feature_dim, projector_hidden, projection_dim)
        self.projector_t = self.projector_v if share_projector else Projector(
            feature_dim, projector_hidden, projection_dim)
        self.text_projection = nn.Linear(encoders.joint_dim, feature_dim)
        self.classifier = PrototypeClassifier(feature_dim, num_classes, generator=generator)

    def parameter_groups(self):
        """Named groups: visual tail, projector heads, classifier, text projection."""
        seen = set()

        def unique(params):
            out = []
            for p in params:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
            return out

        tail = list(self.tail.parameters())
        if self.visual_proj is not None:
            tail += list(self.visual_proj.parameters())
        return {
            "visual_tail": unique(tail),
            "projectors": unique(list(self.projector_v.parameters()) + list(self.projector_t.parameters())),
            "classifier": unique(self.classifier.parameters()),
            "text_projection": unique(self.text_projection.parameters()),
        }

    def visual_features(self, trunk):
        f = self.tail(trunk)
        if self.visual_proj is not None:
            f = self.visual_proj(f)
        return f

    def classify(self, features):
        return self.classifier(features)


def classify(features, prototypes):
    """Cosine logits between features and prototype rows."""
    if prototypes.shape[0] == 0:
        raise InvalidStateError("classifier has no prototypes")
    return F.normalize(features, dim=-1) @ F.normalize(prototypes, dim=-1).T


# -- loss composition ---------------------------------------------------------

def branch_loss(h_a, h_b, logits_a, logits_b, labels, mask, weights, temps, tau_t,
                exclude_positive=False, detach_teacher=True):
    """Representation plus classification loss for one branch.

    Every two-view op is averaged over both view orders. Returns a dict with
    the four primitive values and the weighted ``rep``, ``cls`` and ``total``.
    """
    lam = weights.lambda_balance
    mask = torch.as_tensor(mask, dtype=torch.bool)
    y = torch.as_tensor(labels, dtype=torch.long)[mask]
    zero = (h_a.sum() + logits_a.sum()) * 0.0
    ucon = 0.5 * (obj.self_contrastive(h_a, h_b, temps.tau_c, exclude_positive)
                  + obj.self_contrastive(h_b, h_a, temps.tau_c, exclude_positive))
    distill = 0.5 * (obj.self_distill(logits_a, logits_b, tau_t, temps.tau_s, detach_teacher)
                     + obj.self_distill(logits_b, logits_a, tau_t, temps.tau_s, detach_teacher))
    if int(mask.sum()) >= 2 and bool((y[:, None] == y[None, :]).sum() > len(y)):
        scon = 0.5 * (obj.supervised_contrastive(h_a[mask], h_b[mask], y, temps.tau_c)
                      + obj.supervised_contrastive(h_b[mask], h_a[mask], y, temps.tau_c))
    else:
        scon = zero
    if int(mask.sum()) >= 1:
        ce = 0.5 * (obj.supervised_ce(logits_a[mask], y, temps.tau_s)
                    + obj.supervised_ce(logits_b[mask], y, temps.tau_s))
    else:
        ce = zero
    rep = (1 - lam) * ucon + lam * scon
    cls = (1 - lam) * distill + lam * ce
    return {"ucon": ucon, "scon": scon, "distill": distill, "ce": ce,
            "rep": rep, "cls": cls, "total": rep + cls}


def _text_inputs(tes, encoders, view):
    with torch.no_grad():
        _, z_v = encoders.encode_images(view)
        return tes.synthesize(z_v)


def forward_batch(model, tes, encoders, batch: Batch, text_embeddings=None):
    """Run both branches on both views.

    ``text_embeddings`` may supply precomputed ``(z_t_a, z_t_b)`` pseudo text
    embeddings; otherwise they come from the frozen TES pipeline.
    """
    out = {}
    views = (batch.view_a, batch.view_b)
    if text_embeddings is None:
        if tes is None:
            raise InvalidStateError("text branch needs a trained TES model")
        text_embeddings = [_text_inputs(tes, encoders, v) for v in views]
    for tag, view, z_t in zip("ab", views, text_embeddings):
        f_v = model.visual_features(encoders.trunk_features(view))
        z_tl = model.text_projection(z_t.to(f_v.dtype))
        out[f"f_v_{tag}"] = f_v
        out[f"z_tl_{tag}"] = z_tl
        out[f"h_v_{tag}"] = model.projector_v(f_v)
        out[f"h_t_{tag}"] = model.projector_t(z_tl)
        out[f"p_v_{tag}"] = model.classify(f_v)
        out[f"p_t_{tag}"] = model.classify(z_tl)
    return out


def visual_branch_loss(fwd, batch, weights, temps, tau_t, **kw):
    return branch_loss(fwd["h_v_a"], fwd["h_v_b"], fwd["p_v_a"], fwd["p_v_b"],
                       batch.labels, batch.labeled_mask, weights, temps, tau_t, **kw)


def text_branch_loss(fwd, batch, weights, temps, tau_t, **kw):
    return branch_loss(fwd["h_t_a"], fwd["h_t_b"], fwd["p_t_a"], fwd["p_t_b"],
                       batch.labels, batch.labeled_mask, weights, temps, tau_t, **kw)


def cico_term(fwd, batch):
    """CICO averaged over both views; ``None`` when the batch has no labeled rows."""
    mask = torch.as_tensor(batch.labeled_mask, dtype=torch.bool)
    if not bool(mask.any()):
        return None
    y = torch.as_tensor(batch.labels)[mask]
    vals = []
    for tag in "ab":
        anchors = obj.compute_anchors(fwd[f"f_v_{tag}"][mask], fwd[f"z_tl_{tag}"][mask], y)
        vals.append(obj.cico_loss(fwd[f"f_v_{tag}"], fwd[f"z_tl_{tag}"], anchors))
    return 0.5 * (vals[0] + vals[1])


def total_loss(fwd, batch, weights, temps, tau_t, exclude_positive=False, detach_teacher=True):
    """Visual + text branch losses, minus weighted mean entropy, plus weighted CICO.

    Returns ``(total, components)``; the weighted terms ``visual``, ``text``,
    ``entropy_term`` and ``cico_term`` sum to ``total``.
    """
    kw = dict(exclude_positive=exclude_positive, detach_teacher=detach_teacher)
    vis = visual_branch_loss(fwd, batch, weights, temps, tau_t, **kw)
    txt = text_branch_loss(fwd, batch, weights, temps, tau_t, **kw)
    h_mm = obj.mean_entropy_regularizer(
        torch.cat([fwd["p_v_a"], fwd["p_v_b"]]), torch.cat([fwd["p_t_a"], fwd["p_t_b"]]), temps.tau_s)
    cico = cico_term(fwd, batch)
    if cico is None:
        cico = h_mm * 0.0
    entropy_term = -weights.epsilon * h_mm
    cico_weighted = weights.lambda_cico * cico
    total = vis["total"] + txt["total"] + entropy_term + cico_weighted
    components = {
        "visual": vis["total"], "text": txt["total"],
        "entropy_term": entropy_term, "cico_term": cico_weighted,
        "h_mm": h_mm, "cico": cico, "total": total,
        **{f"visual_{k}": vis[k] for k in ("ucon", "scon", "distill", "ce")},
        **{f"text_{k}": txt[k] for k in ("ucon", "scon", "distill", "ce")},
    }
    return total, components


# -- estimator ----------------------------------------------------------------

class DualBranchGCD(ClassifierMixin, BaseEstimator):
    """Generalized category discovery with a visual and a pseudo-text branch.

    ``fit(X, y)`` follows the semi-supervised convention: ``y`` holds class ids
    for labeled rows and ``-1`` elsewhere. ``n_classes`` is the total class
    count (known or estimated). ``predict`` returns prototype indices, which
    coincide with class ids on labeled classes and are arbitrary cluster ids
    on new ones.
    """

    def __init__(self, encoders=None, tes=None, n_classes=None, lambda_balance=0.35,
                 lambda_cico=1.0, epsilon=1.0, tau_c=0.07, tau_s=0.1, tau_t=0.04,
                 tau_t_warmup=0.07, tau_t_warmup_epochs=30, epochs=200, batch_size=128,
                 learning_rate=0.1, momentum=0.9, weight_decay=5e-5, projection_dim=256,
                 projector_hidden=256, share_projector=False, finetune_projector=False,
                 view_noise=0.0, exclude_positive=False, prototype_init="ss-kmeans", probe_size=128,
                 seed=0, verbose=False):
        self.encoders = encoders
        self.tes = tes
        self.n_classes = n_classes
        self.lambda_balance = lambda_balance
        self.lambda_cico = lambda_cico
        self.epsilon = epsilon
        self.tau_c = tau_c
        self.tau_s = tau_s
        self.tau_t = tau_t
        self.tau_t_warmup = tau_t_warmup
        self.tau_t_warmup_epochs = tau_t_warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.projection_dim = projection_dim
        self.projector_hidden = projector_hidden
        self.share_projector = share_projector
        self.finetune_projector = finetune_projector
        self.view_noise = view_noise
        self.exclude_positive = exclude_positive
        self.prototype_init = prototype_init
        self.probe_size = probe_size
        self.seed = seed
        self.verbose = verbose

    @property
    def weights(self):
        return obj.LossWeights(self.lambda_balance, self.lambda_cico, self.epsilon)

    @property
    def temperatures(self):
        return obj.TemperatureSet(self.tau_c, self.tau_s, self.tau_t, self.tau_t_warmup,
                                  self.tau_t_warmup_epochs)

    def _build_model(self):
        torch.manual_seed(self.seed)
        model = DualModel(self.encoders, self.n_classes, self.projection_dim, self.projector_hidden,
                          self.share_projector, self.finetune_projector,
                          generator=torch_generator(self.seed))
        return model.to(self.encoders.dtype)

    def _init_prototypes(self, X, y):
        """Seed prototypes from semi-supervised k-means on the initial features.

        Labeled class ``c`` gets the centroid of its own cluster as prototype
        ``c``; the remaining centroids fill the free prototype slots.
        """
        if self.prototype_init == "random":
            return
        if self.prototype_init != "ss-kmeans":
            raise ValueError(f"unknown prototype_init {self.prototype_init!r}")
        from .evaluation import SemiSupervisedKMeans

        with torch.no_grad():
            feats = F.normalize(self.model_.visual_features(self.encoders.trunk_features(X)), dim=-1)
        km = SemiSupervisedKMeans(n_clusters=self.n_classes, seed=self.seed).fit(feats.double().numpy(), y)
        centers = torch.as_tensor(km.cluster_centers_, dtype=feats.dtype)
        slot = dict(km.class_to_cluster_)
        free = iter(sorted(set(range(self.n_classes)) - set(slot)))
        order = [None] * self.n_classes
        for c, k in slot.items():
            order[c] = k
        rest = iter(sorted(set(range(self.n_classes)) - set(slot.values())))
        for c in free:
            order[c] = next(rest)
        with torch.no_grad():
            self.model_.classifier.weight.copy_(F.normalize(centers[order], dim=-1))

    def _make_batch(self, X, y, idx, augment, rng):
        lab = y[idx] != UNLABELED
        return Batch(ids=list(idx), view_a=augment(X[idx], rng), view_b=augment(X[idx], rng),
                     labels=np.where(lab, y[idx], UNLABELED), labeled_mask=lab)

    def probe_consistency(self, X=None, y=None):
        """CICO value on the fixed, un-augmented probe batch chosen at fit time."""
        if X is None:
            X, y = self._probe
        batch = Batch(ids=list(range(len(X))), view_a=X, view_b=X, labels=y, labeled_mask=y != UNLABELED)
        with torch.no_grad():
            fwd = forward_batch(self.model_, self.tes, self.encoders, batch)
            val = cico_term(fwd, batch)
        return 0.0 if val is None else float(val)

    def fit(self, X, y):
        if self.encoders is None:
            raise ValueError("encoders must be provided")
        if self.tes is None or not hasattr(self.tes, "layer_"):
            raise InvalidStateError("text branch needs a trained TES model")
        if self.n_classes is None or self.n_classes < 1:
            raise ValueError("n_classes (total class count) must be a positive integer")
        X = check_payloads(X)
        n = len(X)
        y = check_semi_labels(y, n)
        if (y >= self.n_classes).any():
            raise ValueError("labeled class ids must be < n_classes")
        weights, temps = self.weights, self.temperatures
        self.model_ = self._build_model()
        self.classes_ = np.arange(self.n_classes)
        self._init_prototypes(X, y)
        groups = self.model_.parameter_groups()
        params = [p for g in groups.values() for p in g]
        trainable = {id(p) for p in self.model_.parameters() if p.requires_grad}
        if {id(p) for p in params} != trainable:
            raise InvalidStateError("optimiser parameter list does not match the trainable set")
        encoder_state = self.encoders.state_snapshot()

        rng = np.random.default_rng(self.seed)
        probe_idx = np.sort(np.random.default_rng(self.seed + 1).permutation(n)[:min(self.probe_size, n)])
        self._probe = (X[probe_idx], y[probe_idx])
        self.probe_cico_initial_ = self.probe_consistency()

        augment = UniformNoiseAugment(self.view_noise)
        steps_per_epoch = max(1, len(list(iter_epoch_batches(n, self.batch_size, np.random.default_rng(0)))))
        opt = torch.optim.SGD(params, lr=self.learning_rate, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_lr_lambda(self.epochs * steps_per_epoch))
        self.history_ = []
        keys = ("visual", "text", "entropy_term", "cico_term", "h_mm", "cico", "total")
        for epoch in range(self.epochs):
            tau_t = temps.teacher_at(epoch)
            lr = opt.param_groups[0]["lr"]
            sums = dict.fromkeys(keys, 0.0)
            steps = 0
            self.model_.train()
            for step, idx in enumerate(iter_epoch_batches(n, self.batch_size, rng)):
                batch = self._make_batch(X, y, idx, augment, rng)
                fwd = forward_batch(self.model_, self.tes, self.encoders, batch)
                loss, comp = total_loss(fwd, batch, weights, temps, tau_t, self.exclude_positive)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step}",
                        {"epoch": epoch, "step": step,
                         "components": {k: float(v.detach()) for k, v in comp.items()}},
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                self.model_.classifier.renormalize()
                for k in keys:
                    sums[k] += float(comp[k].detach())
                steps += 1
            self.model_.eval()
            record = {k: v / max(steps, 1) for k, v in sums.items()}
            record.update(epoch=epoch, lr=lr, tau_t=tau_t, probe_cico=self.probe_consistency())
            self.history_.append(record)
            if self.verbose:
                logger.info("dual epoch %d total %.4f h_mm %.4f cico %.4f", epoch,
                            record["total"], record["h_mm"], record["cico"])
        self.probe_cico_final_ = self.probe_consistency()
        after = self.encoders.state_snapshot()
        if any(not torch.equal(encoder_state[k], after[k]) for k in encoder_state):
            raise InvalidStateError("frozen encoder parameters changed during dual-branch training")
        self.n_epochs_trained_ = self.epochs
        return self

    def features(self, X):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return self.model_.visual_features(self.encoders.trunk_features(check_payloads(X)))

    def decision_function(self, X):
        """Cosine logits of the visual branch."""
        with torch.no_grad():
            return self.model_.classify(self.features(X)).cpu().numpy()

    def predict_proba(self, X):
        logits = torch.as_tensor(self.decision_function(X))
        return obj.softmax_t(logits, self.tau_s).numpy()

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def mean_prediction_entropy(self, X):
        """Entropy of the mean visual+text prediction over ``X`` (un-augmented)."""
        check_is_fitted(self, "model_")
        X = check_payloads(X)
        batch = Batch(ids=list(range(len(X))), view_a=X, view_b=X,
                      labels=np.full(len(X), UNLABELED), labeled_mask=np.zeros(len(X), bool))
        with torch.no_grad():
            fwd = forward_batch(self.model_, self.tes, self.encoders, batch)
            return float(obj.mean_entropy_regularizer(fwd["p_v_a"], fwd["p_t_a"], self.tau_s))

    # -- checkpoint -----------------------------------------------------

    _CONFIG_KEYS = ("n_classes", "lambda_balance", "lambda_cico", "epsilon", "tau_c", "tau_s",
                    "tau_t", "tau_t_warmup", "tau_t_warmup_epochs", "epochs", "batch_size",
                    "learning_rate", "momentum", "weight_decay", "projection_dim",
                    "projector_hidden", "share_projector", "finetune_projector", "view_noise",
                    "exclude_positive", "prototype_init", "probe_size", "seed")

    def save(self, path):
        check_is_fitted(self, "model_")
        config = {k: getattr(self, k) for k in self._CONFIG_KEYS}
        header = {"format": CHECKPOINT_FORMAT, "config": config,
                  "epoch": int(getattr(self, "n_epochs_trained_", 0)), "seed": int(self.seed)}
        tensors = {f"param/{k}": v.detach().cpu().numpy().astype(np.float32)
                   for k, v in self.model_.state_dict().items()}
        try:
            np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), **tensors)
        except OSError as exc:
            raise OSError(f"cannot write dual checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path, encoders, tes=None):
        try:
            data = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise InvalidStateError(f"cannot read dual checkpoint {path}: {exc}") from exc
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a dual-branch checkpoint")
        est = cls(encoders=encoders, tes=tes, **header["config"])
        est.model_ = est._build_model()
        state = {k[len("param/"):]: torch.from_numpy(data[k]).to(encoders.dtype)
                 for k in data.files if k.startswith("param/")}
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.classes_ = np.arange(est.n_classes)
        est.n_epochs_trained_ = header["epoch"]
        est.history_ = []
        return est


def train_dual(dataset, split, tes, encoders, **params):
    """Fit a :class:`DualBranchGCD` on a dataset/split pair; K = |all classes|."""
    from .data import split_arrays

    X, y_semi, _, _ = split_arrays(dataset, split)
    params.setdefault("n_classes", split.num_classes)
    return DualBranchGCD(encoders=encoders, tes=tes, **params).fit(X, y_semi)
