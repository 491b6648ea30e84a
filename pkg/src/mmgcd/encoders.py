"""Frozen image/text encoder backends.

Every backend exposes the same surface:

* ``encode_images(payloads, mode)`` -> ``(backbone, joint)``
* ``trunk_features`` / ``make_trainable_tail`` / ``joint_projection`` for the
  stage-2 split between the frozen trunk and the trainable last block
* ``encode_class_names(names, template)`` -> :class:`ClassTextTable`
* ``encode_pseudo_tokens(tokens)`` -> unit-norm joint embeddings, with
  gradients flowing to ``tokens`` only

:class:`SyntheticOracleEncoders` is a deterministic stand-in built from the
synthetic generator's anchors; :class:`ClipEncoders` wraps a CLIP checkpoint
through ``transformers``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPT_TEMPLATE = "a photo of a {}"


def build_prompt(class_name: str, template: str = PROMPT_TEMPLATE) -> str:
    if not class_name:
        raise ValueError("class name must be non-empty")
    return template.format(class_name)


@dataclass
class ClassTextTable:
    """Real text embeddings, one unit-norm row per known class name."""

    embeddings: torch.Tensor
    class_names: list

    def __len__(self):
        return self.embeddings.shape[0]


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_names(class_names):
    names = list(class_names)
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    for n in names:
        build_prompt(n)
    return names


class ResidualTail(nn.Module):
    """Stand-in for the last transformer block: ``x + W2 tanh(W1 x)``."""

    def __init__(self, dim, scale=0.1, generator=None):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        with torch.no_grad():
            self.fc1.weight.copy_(torch.randn(dim, dim, generator=generator) / dim ** 0.5)
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(scale * torch.randn(dim, dim, generator=generator) / dim ** 0.5)
            self.fc2.bias.zero_()

    def forward(self, x):
        return x + self.fc2(torch.tanh(self.fc1(x)))


class _FrozenMixin:
    def _freeze(self, *modules):
        for m in modules:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def frozen_modules(self):
        raise NotImplementedError

    def state_snapshot(self) -> dict:
        """Copy of every encoder parameter, for bit-identity audits."""
        out = {}
        for name, module in self.frozen_modules().items():
            for k, v in module.state_dict().items():
                out[f"{name}.{k}"] = v.detach().clone()
        return out


class SyntheticOracleEncoders(_FrozenMixin):
    """Linear-ish oracle encoders aligned with the synthetic class anchors.

    The image encoder maps a latent ``[v; t]`` through a fixed isometric trunk,
    a small residual tail and an isometric joint projection, where the text
    part is damped by ``text_visibility``. Row c of the class-name table is
    the same encoder applied to the undamped class anchor, so at zero noise
    and full visibility an instance embeds exactly onto its class-name row.
    Pseudo tokens are averaged and mapped by a fixed affine ``text_map``.
    """

    backend = "synthetic"

    def __init__(self, oracle, backbone_dim=48, joint_dim=32, token_dim=32, max_tokens=16,
                 tail_scale=0.1, dtype=torch.float32, seed=None):
        latent_dim = oracle.latent_anchors.shape[1]
        if not latent_dim <= joint_dim <= backbone_dim:
            raise ValueError("need latent_dim <= joint_dim <= backbone_dim")
        self.oracle = oracle
        self.latent_dim = latent_dim
        self.backbone_dim = backbone_dim
        self.joint_dim = joint_dim
        self.token_dim = token_dim
        self.max_tokens = max_tokens
        self.trainable_tail_depth = 1
        self.dtype = dtype
        g = torch.Generator().manual_seed(int(oracle.seed if seed is None else seed) + 7919)

        q, _ = torch.linalg.qr(torch.randn(backbone_dim, backbone_dim, generator=g, dtype=torch.float64))
        self.trunk = nn.Linear(latent_dim, backbone_dim, bias=False)
        self.proj = nn.Linear(backbone_dim, joint_dim, bias=False)
        self.tail = ResidualTail(backbone_dim, scale=tail_scale, generator=g)
        self.text_map = nn.Linear(token_dim, joint_dim)
        with torch.no_grad():
            self.trunk.weight.copy_(q[:, :latent_dim])
            self.proj.weight.copy_(q[:, :joint_dim].T)
            self.text_map.weight.copy_(torch.randn(joint_dim, token_dim, generator=g) / token_dim ** 0.5)
            self.text_map.bias.copy_(0.05 * torch.randn(joint_dim, generator=g) / joint_dim ** 0.5)
        for m in (self.trunk, self.proj, self.tail, self.text_map):
            m.to(dtype)
        self._freeze(self.trunk, self.proj, self.tail, self.text_map)

        dv = oracle.visual_anchors.shape[1]
        scale = torch.ones(latent_dim, dtype=dtype)
        scale[dv:] = float(oracle.text_visibility)
        self._visibility = scale
        self._names = list(oracle.class_names)
        anchors = as_tensor(oracle.latent_anchors, dtype)
        with torch.no_grad():
            self._name_rows = self.joint_projection(self.tail(self.trunk(anchors)))

    def frozen_modules(self):
        return {"trunk": self.trunk, "tail": self.tail, "proj": self.proj, "text_map": self.text_map}

    def _payloads(self, payloads):
        x = as_tensor(payloads, self.dtype)
        if x.ndim != 2 or x.shape[1] != self.latent_dim:
            raise ValueError(
                f"synthetic backend expects (n, {self.latent_dim}) latent payloads, got {tuple(x.shape)}"
            )
        return x

    def trunk_features(self, payloads) -> torch.Tensor:
        with torch.no_grad():
            return self.trunk(self._payloads(payloads) * self._visibility)

    def make_trainable_tail(self) -> nn.Module:
        tail = copy.deepcopy(self.tail)
        tail.train()
        for p in tail.parameters():
            p.requires_grad_(True)
        return tail

    def make_trainable_projector(self) -> nn.Module:
        proj = copy.deepcopy(self.proj)
        for p in proj.parameters():
            p.requires_grad_(True)
        return proj

    def joint_projection(self, backbone: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(backbone), dim=-1)

    def encode_images(self, payloads, mode="frozen", tail=None):
        if mode not in ("frozen", "trainable-tail"):
            raise ValueError(f"unknown mode {mode!r}")
        trunk = self.trunk_features(payloads)
        if mode == "frozen":
            with torch.no_grad():
                backbone = self.tail(trunk)
                return backbone, self.joint_projection(backbone)
        backbone = (tail or self.tail)(trunk)
        return backbone, self.joint_projection(backbone)

    def encode_class_names(self, class_names, template=PROMPT_TEMPLATE) -> ClassTextTable:
        names = _check_names(class_names)
        lookup = {build_prompt(n, template): i for i, n in enumerate(self._names)}
        rows = []
        for n in names:
            prompt = build_prompt(n, template)
            if prompt not in lookup:
                raise ValueError(f"synthetic backend has no text anchor for {prompt!r}")
            rows.append(lookup[prompt])
        return ClassTextTable(self._name_rows[rows].clone(), names)

    def encode_pseudo_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = as_tensor(tokens, self.dtype)
        if tokens.ndim != 3 or tokens.shape[2] != self.token_dim:
            raise ValueError(f"tokens must be (n, k, {self.token_dim}), got {tuple(tokens.shape)}")
        if tokens.shape[1] > self.max_tokens:
            raise ValueError(f"{tokens.shape[1]} pseudo tokens exceed max_tokens={self.max_tokens}")
        return F.normalize(self.text_map(tokens.mean(dim=1)), dim=-1)

    def class_text_preimage(self, class_index: int, k: int) -> torch.Tensor:
        """Tokens whose pseudo-text embedding lands on class ``class_index``'s row."""
        target = self._name_rows[class_index] - self.text_map.bias
        mean_token = torch.linalg.pinv(self.text_map.weight.to(torch.float64)) @ target.to(torch.float64)
        return mean_token.to(self.dtype).expand(k, -1).clone()


class _ClipTail(nn.Module):
    """Last vision transformer block plus CLS pooling and the post layer norm."""

    def __init__(self, layer, post_layernorm):
        super().__init__()
        self.layer = layer
        self.post_layernorm = post_layernorm

    def forward(self, hidden):
        out = self.layer(hidden, None)
        if isinstance(out, tuple):
            out = out[0]
        return self.post_layernorm(out[:, 0, :])


class ClipEncoders(_FrozenMixin):
    """Pretrained CLIP behind the encoder contract.

    ``model`` is a ``transformers.CLIPModel``; use :meth:`from_pretrained` to
    load one from a local weight directory. Pseudo tokens are framed by the
    start/end token embeddings, get the native positional embeddings, run
    through the causal text transformer and are read out at the end token.
    """

    backend = "pretrained"

    def __init__(self, model, tokenizer=None, image_processor=None, dtype=torch.float32):
        self.model = model.to(dtype)
        self.tokenizer = tokenizer
        self.image_processor = image_processor
        self.dtype = dtype
        vcfg, tcfg = model.config.vision_config, model.config.text_config
        self.backbone_dim = vcfg.hidden_size
        self.joint_dim = model.config.projection_dim
        self.token_dim = tcfg.hidden_size
        self.max_tokens = tcfg.max_position_embeddings - 2
        self.trainable_tail_depth = 1
        self.bos_token_id = tcfg.bos_token_id
        self.eos_token_id = tcfg.eos_token_id
        self._freeze(self.model)
        vm = model.vision_model
        self.tail = _ClipTail(vm.encoder.layers[-1], vm.post_layernorm)

    @classmethod
    def from_pretrained(cls, weights_path, dtype=torch.float32):
        from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

        try:
            model = CLIPModel.from_pretrained(weights_path)
            tokenizer = CLIPTokenizer.from_pretrained(weights_path)
            processor = CLIPImageProcessor.from_pretrained(weights_path)
        except OSError as exc:
            raise OSError(f"cannot load CLIP weights from {weights_path}: {exc}") from exc
        return cls(model, tokenizer, processor, dtype=dtype)

    def frozen_modules(self):
        return {"clip": self.model}

    def _pixels(self, payloads):
        if isinstance(payloads, torch.Tensor) and payloads.ndim == 4:
            return payloads.to(self.dtype)
        if self.image_processor is None:
            raise ValueError("pretrained backend needs an image processor to decode image paths")
        from PIL import Image

        images = [Image.open(p).convert("RGB") for p in payloads]
        return self.image_processor(images=images, return_tensors="pt")["pixel_values"].to(self.dtype)

    def trunk_features(self, payloads):
        vm = self.model.vision_model
        with torch.no_grad():
            h = vm.pre_layrnorm(vm.embeddings(self._pixels(payloads)))
            for layer in vm.encoder.layers[:-1]:
                out = layer(h, None)
                h = out[0] if isinstance(out, tuple) else out
        return h

    def make_trainable_tail(self):
        tail = copy.deepcopy(self.tail)
        tail.train()
        for p in tail.parameters():
            p.requires_grad_(True)
        return tail

    def make_trainable_projector(self):
        proj = copy.deepcopy(self.model.visual_projection)
        for p in proj.parameters():
            p.requires_grad_(True)
        return proj

    def joint_projection(self, backbone):
        return F.normalize(self.model.visual_projection(backbone), dim=-1)

    def encode_images(self, payloads, mode="frozen", tail=None):
        if mode not in ("frozen", "trainable-tail"):
            raise ValueError(f"unknown mode {mode!r}")
        trunk = self.trunk_features(payloads)
        if mode == "frozen":
            with torch.no_grad():
                backbone = self.tail(trunk)
                return backbone, self.joint_projection(backbone)
        backbone = (tail or self.tail)(trunk)
        return backbone, self.joint_projection(backbone)

    def _text_from_embeddings(self, inputs_embeds, pool_index):
        tm = self.model.text_model
        h = tm.embeddings(inputs_embeds=inputs_embeds)
        L = h.shape[1]
        mask = torch.full((L, L), float("-inf"), dtype=h.dtype).triu(1)[None, None]
        h = tm.encoder(inputs_embeds=h, attention_mask=mask).last_hidden_state
        h = tm.final_layer_norm(h)
        pooled = h[torch.arange(h.shape[0]), pool_index]
        return F.normalize(self.model.text_projection(pooled), dim=-1)

    def encode_pseudo_tokens(self, tokens):
        tokens = as_tensor(tokens, self.dtype)
        n, k, d = tokens.shape
        if d != self.token_dim:
            raise ValueError(f"tokens must have width {self.token_dim}, got {d}")
        if k > self.max_tokens:
            raise ValueError(f"{k} pseudo tokens exceed max_tokens={self.max_tokens}")
        table = self.model.text_model.embeddings.token_embedding.weight
        bos = table[self.bos_token_id].expand(n, 1, d)
        eos = table[self.eos_token_id].expand(n, 1, d)
        seq = torch.cat([bos, tokens, eos], dim=1)
        return self._text_from_embeddings(seq, torch.full((n,), k + 1, dtype=torch.long))

    def encode_class_names(self, class_names, template=PROMPT_TEMPLATE):
        names = _check_names(class_names)
        if self.tokenizer is None:
            raise ValueError("pretrained backend needs a tokenizer to encode class names")
        prompts = [build_prompt(n, template) for n in names]
        batch = self.tokenizer(prompts, padding=True, return_tensors="pt")
        with torch.no_grad():
            pooled = self.model.text_model(**batch).pooler_output
            emb = F.normalize(self.model.text_projection(pooled), dim=-1)
        return ClassTextTable(emb.to(self.dtype), names)


def build_encoders(backend="synthetic", oracle=None, weights_path=None, **kwargs):
    """Backend factory keyed by the ``encoder.backend`` config value."""
    if backend == "synthetic":
        if oracle is None:
            raise ValueError("synthetic backend needs the generator's oracle parameters")
        return SyntheticOracleEncoders(oracle, **kwargs)
    if backend == "pretrained":
        if not weights_path:
            raise ValueError("pretrained backend needs encoder.weights_path")
        dtype = kwargs.get("dtype", torch.float32)
        return ClipEncoders.from_pretrained(weights_path, dtype=dtype)
    raise ValueError(f"unknown encoder backend {backend!r}")
