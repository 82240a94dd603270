"""Finite-difference verification of every gradient path.

Each check builds a deliberately tiny float64 instance, runs the analytic
backward pass, and compares against central differences on a coordinate
subsample. Both the `gradcheck` command and the test suite call these, so the
numbers printed at the terminal and the numbers asserted in CI are the same
computation.
"""

from __future__ import annotations

import numpy as np

from .bridge import Bridge
from .decoder_lm import DecoderConfig, DecoderLM
from .feature_extractor import (
    DayInputs,
    FeatureExtractor,
    FeatureExtractorConfig,
    GruLayer,
    ctc_loss_grad,
    length_mask,
)
from .seeding import INIT, rng_for
from .training import grad_check

__all__ = ["TOLERANCE", "run_all", "check_gru", "check_day_layers", "check_ctc",
           "check_bridge", "check_decoder", "check_lora", "check_end_to_end"]

TOLERANCE = 1e-4

_TINY_DECODER = dict(vocab_size=8, embed_dim=8, num_layers=1, num_heads=2,
                     ff_dim=16, max_context=32, bos_id=5, eos_id=6, pad_id=7)


def check_gru(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 11)
    B, T, D, H = 2, 5, 3, 4
    layer = GruLayer(D, H, bidirectional=True, rng=rng)
    x = rng.standard_normal((B, T, D))
    lengths = np.array([5, 3])
    mask = length_mask(lengths, T).astype(np.float64)
    w = rng.standard_normal((B, T, 2 * H)) * mask[:, :, None]

    def compute():
        h, cache = layer.forward(x, lengths, mask)
        layer.zero_grad()
        dx = layer.backward(w, cache)
        return float((h * w).sum()), {"x": dx, **layer.named_grads()}

    return grad_check({"x": x, **layer.named_parameters()}, compute,
                      max_coords=25, seed=seed)


def check_day_layers(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 12)
    day = DayInputs(4, ["a", "b"])
    x = rng.standard_normal((3, 2, 4))
    sids = ["a", "b", "a"]
    w = rng.standard_normal(x.shape)

    def compute():
        y, cache = day.forward(x, sids)
        day.zero_grad()
        dx = day.backward(w, cache)
        return float((y * w).sum()), {"x": dx, **day.named_grads()}

    return grad_check({"x": x, **day.named_parameters()}, compute,
                      max_coords=25, seed=seed)


def check_ctc(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 13)
    logits = rng.standard_normal((6, 5))
    target = [1, 2, 2]

    def compute():
        loss, grad = ctc_loss_grad(logits, target)
        return loss, {"logits": grad}

    return grad_check({"logits": logits}, compute, max_coords=30, seed=seed)


def check_bridge(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 14)
    bridge = Bridge(3, 4, rng)
    z = rng.standard_normal((2, 3, 3))
    w = rng.standard_normal((2, 3, 4))

    def compute():
        E, cache = bridge.project(z)
        bridge.zero_grad()
        dz = bridge.backward(cache, w)
        return float((E * w).sum()), {"z": dz, **bridge.named_grads()}

    return grad_check({"z": z, **bridge.named_parameters()}, compute,
                      max_coords=25, seed=seed)


def _tiny_decoder(rng: np.random.Generator) -> DecoderLM:
    return DecoderLM(DecoderConfig(**_TINY_DECODER), rng)


def check_decoder(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 15)
    decoder = _tiny_decoder(rng)
    E = rng.standard_normal((2, 3, 8))
    prefix_lengths = [3, 2]
    targets = [[1, 2, 6], [0, 6]]

    def compute():
        loss, cache = decoder.nll_batch(E, prefix_lengths, targets)
        decoder.zero_grad()
        dE = decoder.nll_batch_backward(cache)
        return loss, {"E": dE, **decoder.named_grads()}

    return grad_check({"E": E, **decoder.named_parameters()}, compute,
                      max_coords=8, seed=seed)


def check_lora(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 16)
    decoder = _tiny_decoder(rng)
    lora_names = decoder.attach_lora(2, rng_for(seed, INIT, 17))
    # push B off zero so its gradient path is exercised at a generic point
    for name in lora_names:
        if name.endswith("lora_B"):
            decoder.named_parameters()[name][...] = 0.1 * rng.standard_normal(
                decoder.named_parameters()[name].shape)
    E = rng.standard_normal((2, 3, 8))
    prefix_lengths = [3, 2]
    targets = [[1, 2, 6], [0, 6]]

    def compute():
        loss, cache = decoder.nll_batch(E, prefix_lengths, targets)
        decoder.zero_grad()
        decoder.nll_batch_backward(cache)
        grads = decoder.named_grads()
        return loss, {n: grads[n] for n in lora_names}

    params = decoder.named_parameters()
    return grad_check({n: params[n] for n in lora_names}, compute,
                      max_coords=16, seed=seed)


def check_end_to_end(seed: int = 0) -> float:
    rng = rng_for(seed, INIT, 18)
    fe_cfg = FeatureExtractorConfig(num_layers=1, hidden=4, bidirectional=False,
                                    stack_k=2, stack_s=2)
    fe = FeatureExtractor(fe_cfg, channels=3, sessions=["a", "b"],
                          alphabet_size=4, rng=rng)
    bridge = Bridge(fe_cfg.feature_dim, 8, rng)
    decoder = _tiny_decoder(rng)
    signals = [rng.standard_normal((8, 3)), rng.standard_normal((6, 3))]
    sids = ["a", "b"]
    targets = [[1, 2, 6], [0, 6]]

    params = {f"fe.{n}": p for n, p in fe.named_parameters().items()
              if not n.startswith("ctc_head.")}
    params.update({f"bridge.{n}": p for n, p in bridge.named_parameters().items()})
    params.update({f"decoder.{n}": p for n, p in decoder.named_parameters().items()})

    def compute():
        Z, lengths, fcache = fe.forward_batch(signals, sids)
        E, bcache = bridge.project(Z)
        loss, dcache = decoder.nll_batch(E, [int(x) for x in lengths], targets)
        fe.zero_grad()
        bridge.zero_grad()
        decoder.zero_grad()
        dE = decoder.nll_batch_backward(dcache)
        dZ = bridge.backward(bcache, dE)
        fe.backward_batch(dZ, fcache)
        grads = {f"fe.{n}": g for n, g in fe.named_grads().items()
                 if not n.startswith("ctc_head.")}
        grads.update({f"bridge.{n}": g for n, g in bridge.named_grads().items()})
        grads.update({f"decoder.{n}": g for n, g in decoder.named_grads().items()})
        return loss, grads

    return grad_check(params, compute, max_coords=6, seed=seed)


def run_all(seed: int = 0) -> dict[str, float]:
    """Worst relative error per component, in presentation order."""
    return {
        "day_layers": check_day_layers(seed),
        "gru": check_gru(seed),
        "ctc": check_ctc(seed),
        "bridge": check_bridge(seed),
        "decoder": check_decoder(seed),
        "lora": check_lora(seed),
        "end_to_end": check_end_to_end(seed),
    }
