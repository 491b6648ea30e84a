"""Orchestration behind the CLI commands.

Each ``run_*`` function takes a :class:`PipelineConfig`, an output directory
and explicit input paths, writes its artifacts and returns the report dict.
"""

from __future__ import annotations

import json
import logging
import os
import time

import numpy as np

from . import data as D
from .cache import export_embeddings, read_cache, write_cache
from .config import PipelineConfig
from .dual import DualBranchGCD
from .encoders import build_encoders
from .evaluation import concat_features, estimate_class_number, grouped_acc, ss_kmeans
from .exceptions import InvalidStateError
from .tes import TextEmbeddingSynthesizer

logger = logging.getLogger(__name__)

SPLIT_FILE = "split.json"
TES_FILE = "tes.npz"
CACHE_FILE = "embeddings.bin"
DUAL_FILE = "dual.npz"
REPORT_FORMAT = "mmgcd-report/1"

_TES_KEYS = ("token_count", "tau_a", "epochs", "batch_size", "learning_rate", "momentum",
             "weight_decay", "distill_include_positive")
_DUAL_KEYS = ("lambda_balance", "lambda_cico", "epsilon", "tau_c", "tau_s", "tau_t",
              "tau_t_warmup", "tau_t_warmup_epochs", "epochs", "batch_size", "learning_rate",
              "momentum", "weight_decay", "projection_dim", "projector_hidden", "share_projector",
              "finetune_projector", "exclude_positive", "prototype_init", "probe_size")


# -- shared inputs -------------------------------------------------------------

class Workspace:
    """Dataset, oracle and encoders implied by a config, built once."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        manifest = config["data.manifest"]
        if manifest:
            base = os.path.dirname(manifest)
            self.dataset = [_with_abs_payload(inst, base) for inst in D.read_manifest(manifest)]
            self.oracle = None
        else:
            spec = D.SyntheticDatasetSpec(
                num_classes=config["data.num_classes"], per_class=config["data.per_class"],
                visual_dim=config["data.visual_dim"], text_dim=config["data.text_dim"],
                class_margin=config["data.class_margin"], view_noise=config["data.view_noise"],
                instance_noise=config["data.instance_noise"], visual_share=config["data.visual_share"],
                text_visibility=config["data.text_visibility"],
                visual_noise_scale=config["data.visual_noise_scale"], seed=config["data.seed"])
            self.dataset, self.oracle = D.make_synthetic_dataset(spec)
        self._encoders = None

    @property
    def encoders(self):
        if self._encoders is None:
            cfg = self.config
            if cfg["encoder.backend"] == "synthetic":
                if self.oracle is None:
                    raise ValueError("the synthetic encoder backend needs the synthetic generator "
                                     "(leave data.manifest empty)")
                self._encoders = build_encoders(
                    "synthetic", oracle=self.oracle, backbone_dim=cfg["encoder.backbone_dim"],
                    joint_dim=cfg["encoder.joint_dim"], token_dim=cfg["encoder.token_dim"])
            else:
                self._encoders = build_encoders("pretrained", weights_path=cfg["encoder.weights_path"])
        return self._encoders

    def class_names(self):
        path = self.config["data.class_names"]
        if path:
            with open(path, encoding="utf-8") as fh:
                return [line.strip() for line in fh if line.strip()]
        if self.oracle is not None:
            return self.oracle.class_names
        raise ValueError("data.class_names is required for manifest datasets")

    @property
    def num_classes(self):
        return len({inst.class_id for inst in self.dataset})

    def arrays(self, split):
        return D.split_arrays(self.dataset, split)


def _with_abs_payload(inst, base):
    ref = inst.payload_ref
    if isinstance(ref, str) and not os.path.isabs(ref):
        return D.Instance(inst.instance_id, inst.class_id, os.path.join(base, ref), inst.domain_tag)
    return inst


def _report(command, config, seed, started, **body):
    out = {"format": REPORT_FORMAT, "command": command, "config": config.to_dict(), "seed": int(seed)}
    out.update(body)
    out["timing"] = {"wall_clock_s": time.perf_counter() - started}
    return out


def write_report(report, path):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(report), fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _split_summary(ws, split):
    labeled = len(split.labeled_ids)
    return {"num_instances": len(ws.dataset), "num_labeled": labeled,
            "num_unlabeled": len(split.unlabeled_ids), "num_classes": split.num_classes,
            "num_old_classes": split.num_old,
            "num_new_classes": split.num_classes - split.num_old}


def _load_split(ws, split_path):
    split = D.read_split(split_path)
    try:
        split.validate(ws.dataset)
    except ValueError as exc:
        raise InvalidStateError(f"split {split_path} does not match the configured dataset: {exc}") from exc
    return split


def _load_tes(ws, tes_path):
    if not os.path.exists(tes_path):
        raise InvalidStateError(f"TES checkpoint {tes_path} does not exist; run `tes-train` first")
    return TextEmbeddingSynthesizer.load(tes_path, ws.encoders, class_names=ws.class_names())


# -- commands -----------------------------------------------------------------

def run_split(config, out_dir):
    started = time.perf_counter()
    ws = Workspace(config)
    split = D.build_gcd_split(ws.dataset, config["split.old_class_count"],
                              config["split.labeled_fraction"], seed=config["split.seed"],
                              first_n_old=config["split.first_n_old"])
    D.write_split(split, os.path.join(out_dir, SPLIT_FILE))
    return _report("split", config, config["split.seed"], started, split=_split_summary(ws, split))


def run_tes_train(config, out_dir, split_path):
    started = time.perf_counter()
    ws = Workspace(config)
    split = _load_split(ws, split_path)
    X, y_semi, _, _ = ws.arrays(split)
    params = {k: config[f"tes.{k}"] for k in _TES_KEYS}
    tes = TextEmbeddingSynthesizer(ws.encoders, class_names=ws.class_names(),
                                   view_noise=config["data.view_noise"], seed=config["seed"], **params)
    tes.fit(X, y_semi)
    tes.save(os.path.join(out_dir, TES_FILE))
    cache = export_embeddings(tes, ws.dataset)
    write_cache(cache, os.path.join(out_dir, CACHE_FILE))
    metrics = tes_metrics(tes, ws, split)
    return _report("tes-train", config, config["seed"], started, history=tes.history_,
                   epochs=tes.n_epochs_trained_, metrics=metrics)


def tes_metrics(tes, ws, split):
    """Image-to-pseudo-text retrieval top-1 and labeled cosine to class-name rows."""
    X, y_semi, _, _ = ws.arrays(split)
    z_v, z_t = tes.embed(X)
    z_v, z_t = z_v.double().numpy(), z_t.double().numpy()
    sim = z_v @ z_t.T
    retrieval = float((sim.argmax(axis=1) == np.arange(len(sim))).mean())
    labeled = y_semi != D.UNLABELED
    cos = None
    if labeled.any():
        names = ws.class_names()
        old = sorted(int(c) for c in np.unique(y_semi[labeled]))
        table = ws.encoders.encode_class_names([names[c] for c in old]).embeddings.double().numpy()
        rows = np.searchsorted(old, y_semi[labeled])
        cos = float((z_t[labeled] * table[rows]).sum(axis=1).mean())
    return {"retrieval_top1": retrieval, "labeled_cosine": cos}


def run_train(config, out_dir, split_path, tes_path):
    started = time.perf_counter()
    ws = Workspace(config)
    split = _load_split(ws, split_path)
    tes = _load_tes(ws, tes_path)
    X, y_semi, y_true, _ = ws.arrays(split)
    n_classes = config["train.n_classes"] or split.num_classes
    params = {k: config[f"train.{k}"] for k in _DUAL_KEYS}
    model = DualBranchGCD(ws.encoders, tes, n_classes=n_classes, view_noise=config["data.view_noise"],
                          seed=config["seed"], **params)
    model.fit(X, y_semi)
    model.save(os.path.join(out_dir, DUAL_FILE))
    unlabeled = y_semi == D.UNLABELED
    acc = grouped_acc(y_true[unlabeled], model.predict(X)[unlabeled], split.old_classes, n_classes)
    return _report("train", config, config["seed"], started, history=model.history_,
                   epochs=model.n_epochs_trained_, acc=acc.to_dict(),
                   probe_cico={"initial": model.probe_cico_initial_, "final": model.probe_cico_final_},
                   final_h_mm=model.history_[-1]["h_mm"] if model.history_ else None)


def run_eval(config, out_dir, split_path, checkpoint_path=None, tes_path=None, cache_path=None,
             ss_kmeans_baseline=False, concat_tes=False):
    started = time.perf_counter()
    ws = Workspace(config)
    split = _load_split(ws, split_path)
    _, y_semi, y_true, ids = ws.arrays(split)
    unlabeled = y_semi == D.UNLABELED
    n_classes = config["train.n_classes"] or split.num_classes
    body = {"split": _split_summary(ws, split)}
    if checkpoint_path is None and not (ss_kmeans_baseline or concat_tes):
        raise InvalidStateError("nothing to evaluate: no checkpoint and no baseline flag")
    if checkpoint_path is not None:
        if not os.path.exists(checkpoint_path):
            raise InvalidStateError(f"checkpoint {checkpoint_path} does not exist; run `train` first")
        tes = _load_tes(ws, tes_path) if tes_path else None
        model = DualBranchGCD.load(checkpoint_path, ws.encoders, tes)
        if model.n_classes != n_classes:
            raise ValueError(f"checkpoint has {model.n_classes} prototypes but the split "
                             f"expects {n_classes} classes")
        pred = model.predict(D.dataset_payloads(ws.dataset))
        body["acc"] = grouped_acc(y_true[unlabeled], pred[unlabeled], split.old_classes, n_classes).to_dict()
    if ss_kmeans_baseline or concat_tes:
        cache = read_cache(cache_path)
        z_v, z_t = (a.astype(np.float64) for a in cache.take(ids))
        labeled = {i: int(c) for i, c in zip(ids, y_semi) if c != D.UNLABELED}
        feats = {}
        if ss_kmeans_baseline:
            feats["ss_kmeans_visual"] = z_v / np.linalg.norm(z_v, axis=1, keepdims=True)
        if concat_tes:
            feats["ss_kmeans_concat_tes"] = concat_features(z_v, z_t)
        for name, F_ in feats.items():
            assign = ss_kmeans(F_, labeled, n_classes, seed=config["seed"], ids=ids).assignment
            pred = np.array([assign[i] for i in ids])
            body[name] = grouped_acc(y_true[unlabeled], pred[unlabeled], split.old_classes,
                                     n_classes).to_dict()
    return _report("eval", config, config["seed"], started, **body)


def run_estimate_k(config, out_dir, split_path, cache_path):
    started = time.perf_counter()
    ws = Workspace(config)
    split = _load_split(ws, split_path)
    k_min, k_max = config["eval.k_min"], config["eval.k_max"]
    if k_min < split.num_old or k_max > len(ws.dataset):
        raise ValueError(f"k range {k_min}..{k_max} must lie within [{split.num_old}, {len(ws.dataset)}]")
    _, y_semi, _, ids = ws.arrays(split)
    cache = read_cache(cache_path)
    z_v, z_t = (a.astype(np.float64) for a in cache.take(ids))
    k_range = range(k_min, k_max + 1)
    true_k = ws.num_classes
    body = {"k_range": [k_min, k_max], "true_k": true_k}
    for name, F_ in (("visual", z_v / np.linalg.norm(z_v, axis=1, keepdims=True)),
                     ("concat", concat_features(z_v, z_t))):
        k_hat, scores = estimate_class_number(F_, y_semi, k_range, seed=config["seed"])
        body[name] = {"k_hat": int(k_hat), "error": abs(int(k_hat) - true_k),
                      "scores": {str(k): v for k, v in scores.items()}}
    return _report("estimate-k", config, config["seed"], started, **body)


__all__ = ["Workspace", "run_split", "run_tes_train", "run_train", "run_eval", "run_estimate_k",
           "write_report", "read_report", "tes_metrics"]
