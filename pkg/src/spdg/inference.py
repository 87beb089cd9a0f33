"""Offline prediction paths: style-prompted matching and zero-shot baselines.

Everything here is read-only over bundle and checkpoint state; no tape, no
parameter updates. Ties at the argmax go to the lowest class index.
"""

from __future__ import annotations

import numpy as np

from .encoders import (
    FrozenEncoderBundle,
    bare_class_text,
    embed_tokens,
    encode_image,
    encode_text,
    photo_caption_text,
    project_image,
    similarity_logits,
    style_prompt_text,
    tokenize,
)
from .errors import ConfigError
from .losses import prompt_text_features
from .prompter import style_for_prompt
from .tensor import Tensor

ZERO_SHOT_TEMPLATES = {
    "C": bare_class_text,
    "PC": photo_caption_text,
}


def infer(bundle: FrozenEncoderBundle, prompter, x: np.ndarray, classes):
    """Classify one image: extract its style, prompt every class, take the argmax.

    Returns (predicted class name, per-class similarity scores).
    """
    if not classes:
        raise ConfigError("class set must be non-empty")
    z = encode_image(bundle, np.asarray(x, dtype=np.float64))
    style = style_for_prompt(prompter, Tensor(z))
    feats = []
    for cls in classes:
        ids = tokenize(style_prompt_text(cls), bundle)
        emb = embed_tokens(bundle, ids, style=style)
        feats.append(encode_text(bundle, emb).data)
    logits = similarity_logits(bundle, z, Tensor(np.stack(feats))).data
    pred = int(np.argmax(logits))
    return classes[pred], logits


def predict_batch(bundle: FrozenEncoderBundle, prompter, x: np.ndarray, classes):
    """Vectorized inference over (n, d_x) inputs. Returns (pred ids, logits)."""
    if not classes:
        raise ConfigError("class set must be non-empty")
    x = np.asarray(x, dtype=np.float64)
    z = encode_image(bundle, x)
    styles = style_for_prompt(prompter, Tensor(z))
    feats = prompt_text_features(bundle, styles, classes).data
    n, n_classes = x.shape[0], len(classes)
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    zp = project_image(bundle, z)
    zp = zp / np.linalg.norm(zp, axis=1, keepdims=True)
    logits = np.einsum("bcd,bd->bc", feats.reshape(n, n_classes, -1), zp) * bundle.logit_scale
    return logits.argmax(axis=1), logits


def zero_shot_text_features(bundle: FrozenEncoderBundle, classes, template: str) -> np.ndarray:
    if template not in ZERO_SHOT_TEMPLATES:
        raise ConfigError(f"unknown zero-shot template {template!r}, expected one of ['C', 'PC']")
    render = ZERO_SHOT_TEMPLATES[template]
    feats = []
    for cls in classes:
        ids = tokenize(render(cls), bundle)
        emb = embed_tokens(bundle, ids)
        feats.append(encode_text(bundle, emb).data)
    return np.stack(feats)


def zero_shot_baseline(bundle: FrozenEncoderBundle, x: np.ndarray, classes, template: str):
    """Classify with a bare text template and no learned components."""
    if not classes:
        raise ConfigError("class set must be non-empty")
    feats = zero_shot_text_features(bundle, classes, template)
    logits = similarity_logits(bundle, encode_image(bundle, x), Tensor(feats)).data
    pred = int(np.argmax(logits))
    return classes[pred], logits


def zero_shot_predict_batch(bundle: FrozenEncoderBundle, x: np.ndarray, classes,
                            template: str):
    feats = zero_shot_text_features(bundle, classes, template)
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    zp = project_image(bundle, encode_image(bundle, np.asarray(x, dtype=np.float64)))
    zp = zp / np.linalg.norm(zp, axis=1, keepdims=True)
    logits = zp @ feats.T * bundle.logit_scale
    return logits.argmax(axis=1), logits


def accuracy(pred_ids: np.ndarray, labels: np.ndarray) -> float:
    pred_ids = np.asarray(pred_ids)
    labels = np.asarray(labels)
    return float((pred_ids == labels).mean())
