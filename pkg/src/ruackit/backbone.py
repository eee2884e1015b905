"""Frozen feature extractor and prompt encoding standing in for a pretrained encoder.

Nothing here trains.  The extractor is still built from tape primitives so
gradients reach the input image, which is how the attack networks learn.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .autodiff import Tape, Var

N_RANDOM = 6
FEATURE_CHANNELS = 3 + 3 + N_RANDOM
PROMPT_CHANNELS = 4
SIM_SCALE = 0.15


def init_backbone(seed: int = 1234) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    blur = np.zeros((3, 3, 3, 3))
    for c in range(3):
        blur[c, c] = 1.0 / 9.0
    rand = rng.normal(0.0, 1.0 / np.sqrt(27), size=(N_RANDOM, 3, 3, 3))
    return {"blur": blur, "rand": rand, "rand_b": rng.normal(0.0, 0.1, size=N_RANDOM)}


def encode_var(tape: Tape, image: Var, weights: dict) -> Var:
    """Image (3×H×W) -> features (12×H×W): raw colour, local mean, random edges."""
    blur = tape.conv3x3(image, tape.const(weights["blur"]))
    rand = tape.tanh(tape.conv3x3(image, tape.const(weights["rand"]),
                                  tape.const(weights["rand_b"])) * 2.0)
    return tape.concat([image, blur, rand], axis=0)


def click_maps(shape, clicks):
    """One-hot positive/negative click masks and normalized distance maps."""
    h, w = shape
    diag = float(np.hypot(h, w))
    pos = np.zeros((h, w))
    neg = np.zeros((h, w))
    for y, x, label in clicks:
        (pos if label > 0 else neg)[int(y), int(x)] = 1.0
    dists = []
    for m in (pos, neg):
        if m.any():
            dists.append(ndimage.distance_transform_edt(m == 0) / diag)
        else:
            dists.append(np.ones((h, w)))
    return pos, neg, dists[0], dists[1]


def prompt_maps_var(tape: Tape, image: Var, clicks, weights: dict) -> Var:
    """Prompt channels: distance to nearest +/− click and colour similarity to each click set."""
    h, w = image.shape[1:]
    pos, neg, dpos, dneg = click_maps((h, w), clicks)
    blur = tape.conv3x3(image, tape.const(weights["blur"]))
    sims = []
    for m in (pos, neg):
        if m.any():
            centre = tape.masked_mean(blur, tape.const(m), axis=(1, 2))
            d2 = ((blur - centre.reshape(3, 1, 1)) ** 2).sum(axis=0)
            sims.append(tape.exp(d2 * (-0.5 / SIM_SCALE ** 2)).reshape(1, h, w))
        else:
            sims.append(tape.const(np.zeros((1, h, w))))
    return tape.concat([tape.const(dpos[None]), tape.const(dneg[None])] + sims, axis=0)


def features_and_prompts(image, clicks, weights):
    """Eager numpy convenience: (features, prompt maps) for one image."""
    tape = Tape()
    img = tape.const(image)
    return encode_var(tape, img, weights).value, prompt_maps_var(tape, img, clicks, weights).value
