"""Verification suites run by the `gradcheck` and `selftest` commands."""
import logging
import math
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Iterator, List

import numpy as np

from . import data_io
from .attention import (AttentionWeights, attention_map, cca_forward, init_attention_weights, nonlocal_forward,
                        ssa_forward, to_positional, zero_attention_weights)
from .config import derive_seed
from .network import ModelConfig, build_model, ccan_forward, extract_features, slice_parts
from .objective import (TripletSet, lsr_cross_entropy, mine_semihard, pairwise_sq_distances, total_loss,
                        triplet_loss)
from .optim import AdamState, adam_step, lr_at
from .retrieval_eval import average_precision, build_index, evaluate, fuse_features, rank_gallery
from .tensor_core import (Tape, Tensor, backward, bilinear_resize, concat, conv2d, get_dtype, global_avg_pool,
                          grad_check, hadamard, matmul, pool2d, relu, set_precision, sum_all, transpose2d)

logger = logging.getLogger(__name__)

LITE_MODEL = dict(input_h=8, input_w=4, channels=(8, 16, 24), pools=(1, 1, 0), d=8, k_p=2, num_ids=2)
LOSS_SETTINGS = SimpleNamespace(epsilon_lsr=0.1, r=2, tau=1.0)


@contextmanager
def double_precision() -> Iterator[None]:
    previous = np.dtype(get_dtype()).name
    set_precision('float64')
    try:
        yield
    finally:
        set_precision(previous)


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    passed: bool
    coords: int
    resamples: int


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _attention_inputs(rng: np.random.Generator, M: int = 2, N: int = 2, C: int = 8) -> List[Tensor]:
    q = Tensor(rng.normal(size=(M * N, C)), requires_grad=True)
    q_prime = Tensor(rng.normal(size=(M * N, C)), requires_grad=True)
    w = init_attention_weights(M, N, C, rng=rng, requires_grad=True)
    return [q, q_prime] + list(w.tensors().values())


def _weights(M: int, N: int, W_f, W_g, W_h, W_w, W_alpha) -> AttentionWeights:
    K, C = W_f.shape
    return AttentionWeights(W_f, W_g, W_h, W_w, W_alpha, bound_M=M, bound_N=N, bound_C=C, bound_K=K)


def _cca_loss(q, q_prime, *w):
    return sum_all(cca_forward(q, q_prime, _weights(2, 2, *w)))


def _ssa_loss(q, q_prime, *w):
    return sum_all(ssa_forward(q, _weights(2, 2, *w)))


def _nonlocal_loss(q, q_prime, *w):
    return sum_all(nonlocal_forward(q, _weights(2, 2, *w)))


def _lsr_inputs(rng):
    return [Tensor(rng.normal(size=(4, 5)), requires_grad=True)]


def _lsr_loss(logits):
    return lsr_cross_entropy(logits, [0, 1, 2, 3], 0.1)


TRIPLET_LABELS = [0, 0, 1, 1, 2, 2]


def _triplet_inputs(rng):
    return [Tensor(rng.normal(size=(6, 3)), requires_grad=True)]


def _triplet_loss(emb):
    D = pairwise_sq_distances(emb)
    return triplet_loss(D, mine_semihard(D, TRIPLET_LABELS, r=2), tau=1.0)


def lite_model_case(seed: int, setting: str = 'full'):
    """A lite model, a fixed batch of four images and a loss over the model's parameters"""
    config = ModelConfig(setting=setting, **LITE_MODEL)
    model = build_model(config, seed=seed)
    rng = np.random.default_rng(derive_seed(seed, 'gradcheck'))
    images = [Tensor(rng.uniform(0, 1, size=(8, 4, 3))) for _ in range(4)]
    labels = [0, 0, 1, 1]
    names = list(model.params)

    def loss(*tensors):
        candidate = model.with_parameters(dict(zip(names, tensors)))
        return total_loss(ccan_forward(images, candidate), labels, LOSS_SETTINGS).tensor

    return model, names, loss


def gradcheck_suite(tol: float = 1e-4, seed: int = 0, max_coords: int = 4) -> List[GradCheckRow]:
    """Finite-difference checks over attention, both losses and the lite end-to-end model"""
    rows = []
    rng = np.random.default_rng(derive_seed(seed, 'gradcheck'))
    cases = [
        ('cca_forward', _attention_inputs, _cca_loss),
        ('ssa_forward', _attention_inputs, _ssa_loss),
        ('nonlocal_forward', _attention_inputs, _nonlocal_loss),
        ('lsr_cross_entropy', _lsr_inputs, _lsr_loss),
        ('triplet_loss', _triplet_inputs, _triplet_loss),
    ]
    with double_precision():
        for name, draw, loss in cases:
            report = grad_check(loss, draw(rng), h=1e-5, tol=tol, resample=draw, rng=rng)
            rows.append(GradCheckRow(name, report.max_rel_err, report.passed,
                                     report.coords_checked, report.resamples))

        # a kinked probe point gets a freshly seeded model, so the loss closure moves with it
        current = {'seed': seed}
        model, _, current['loss'] = lite_model_case(seed)

        def redraw(_rng):
            current['seed'] += 1
            fresh, _, current['loss'] = lite_model_case(current['seed'])
            return list(fresh.params.values())

        # one parameter step moves a pre-activation by up to a few h here
        report = grad_check(lambda *t: current['loss'](*t), list(model.params.values()), h=1e-5, tol=tol,
                            resample=redraw, rng=rng, kink_margin=5e-5, max_coords=max_coords)
        rows.append(GradCheckRow('lite_end_to_end', report.max_rel_err, report.passed,
                                 report.coords_checked, report.resamples))
    for row in rows:
        logger.info(f"gradcheck {row.name}: max rel err {row.max_rel_err:.2e} "
                    f"({'pass' if row.passed else 'FAIL'}, {row.coords} coords, {row.resamples} resamples)")
    return rows


# ---------------------------------------------------------------------------
# Example assertions
# ---------------------------------------------------------------------------

@dataclass
class SelfTestRow:
    name: str
    passed: bool
    detail: str = ''


_CHECKS: List[tuple] = []


def check(name: str) -> Callable:
    def register(func):
        _CHECKS.append((name, func))
        return func
    return register


def _close(actual, expected, tol=1e-12):
    np.testing.assert_allclose(np.asarray(actual), np.asarray(expected), rtol=0, atol=tol)


@check('matmul products')
def _matmul():
    a = Tensor([[1, 2], [3, 4]])
    _close(matmul(a, Tensor(np.eye(2))).data, a.data)
    _close(matmul(a, Tensor([[5, 6], [7, 8]])).data, [[19, 22], [43, 50]])


@check('relu and hadamard')
def _pointwise():
    _close(relu(Tensor([-1, 0, 3.5])).data, [0, 0, 3.5])
    _close(hadamard(Tensor([1, 2, 3]), Tensor([0, 0, 0])).data, [0, 0, 0])


@check('backward fan-out and squares')
def _backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(hadamard(x, x))
    backward(loss, tape)
    _close(x.grad, [2, 4])


@check('conv2d all-ones 3x3')
def _conv():
    out = conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=1, pad=1)
    _close(out.data[..., 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@check('pooling on a 2x2 map')
def _pool():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    _close(pool2d(x, 'max', 2, 2).data.ravel(), [4])
    _close(pool2d(x, 'avg', 2, 2).data.ravel(), [2.5])
    _close(global_avg_pool(Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))).data, [1.5])


@check('bilinear resize align-corners')
def _resize():
    x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    _close(bilinear_resize(x, 3, 3).data[1, 1, 0], 1.5)
    np.testing.assert_array_equal(bilinear_resize(x, 2, 2).data, x.data)


@check('concat of a map with its transpose')
def _concat():
    a = Tensor(np.arange(16.0).reshape(4, 4))
    assert concat([a, transpose2d(a)], axis=1).shape == (4, 8)


@check('attention residual identity and delegation')
def _attention():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(4, 8)))
    zero = zero_attention_weights(2, 2, 8)
    np.testing.assert_array_equal(cca_forward(q, q, zero).data, q.data)
    np.testing.assert_array_equal(nonlocal_forward(q, zero).data, q.data)
    w = init_attention_weights(2, 2, 8, rng=rng)
    np.testing.assert_array_equal(ssa_forward(q, w).data, cca_forward(q, q, w).data)
    assert (attention_map(q, Tensor(rng.normal(size=(4, 8))), w).data >= 0).all()


@check('positional flattening is row-major')
def _positional():
    Q = Tensor(np.arange(4.0).reshape(2, 2, 1))
    _close(to_positional(Q).data.ravel(), [0, 1, 2, 3])


@check('slice_parts identity for k_p = 1')
def _slices():
    Z = Tensor(np.random.default_rng(1).normal(size=(4, 2, 3)))
    np.testing.assert_array_equal(slice_parts(Z, 1)[0].data, Z.data)


@check('lsr cross-entropy hand values')
def _lsr():
    _close(lsr_cross_entropy(Tensor([[0.0, 0.0, 0.0, 0.0]]), [2], 0.3).item(), math.log(4))
    _close(lsr_cross_entropy(Tensor([[2.0, 0.0, 0.0, 0.0]]), [0], 0.1).item(), 0.4908, tol=1e-3)


@check('pairwise distances 3-4-5')
def _distances():
    D = pairwise_sq_distances(Tensor([[0.0, 0.0], [3.0, 4.0]])).data
    _close(D, [[0, 25], [25, 0]])


@check('semi-hard mining order')
def _mining():
    D = np.array([[0.0, 1.0, 0.5, 1.5, 2.0],
                  [1.0, 0.0, 9.0, 9.0, 9.0],
                  [0.5, 9.0, 0.0, 0.0, 0.0],
                  [1.5, 9.0, 0.0, 0.0, 0.0],
                  [2.0, 9.0, 0.0, 0.0, 0.0]])
    mined = mine_semihard(D, [0, 0, 1, 2, 3], r=10)
    assert [t for t in mined.triplets if t[0] == 0] == [(0, 1, 3), (0, 1, 4)]


@check('triplet hinge values')
def _triplet():
    D = Tensor(np.array([[0.0, 2.0, 2.0], [2.0, 0.0, 1.0], [2.0, 1.0, 0.0]]))
    _close(triplet_loss(D, TripletSet([(0, 1, 2)]), tau=1.0).item(), 1.0)
    _close(triplet_loss(D, TripletSet(), tau=1.0).item(), 0.0)


@check('adam first step and schedule')
def _adam():
    p = {'x': Tensor([1.0], requires_grad=True)}
    cfg = SimpleNamespace(beta1=0.9, beta2=0.99, weight_decay=0.0, lr0=5e-4, lr_plateau=150,
                          lr_decay_every=50, lr_factor=0.1)
    new, _ = adam_step(p, {'x': np.array([1.0])}, AdamState.for_params(p), 0.1, cfg)
    _close(new['x'].data, [0.9], tol=1e-6)
    _close([lr_at(0, cfg), lr_at(150, cfg), lr_at(200, cfg)], [5e-4, 5e-5, 5e-6], tol=1e-15)


@check('fusion and ranking')
def _retrieval():
    _close(fuse_features(Tensor([3.0, 4.0]), Tensor([0.0, 1.0])).data, [0.6, 0.8, 0, 1])
    _close(fuse_features(Tensor([3.0, 4.0]), Tensor([0.0, 0.0])).data, [0.6, 0.8, 0, 0])
    gallery = build_index([Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), Tensor([0.0, 1.0])],
                          [data_io.SampleRecord('g', k, 1, 'gallery') for k in range(3)])
    assert list(rank_gallery(Tensor([0.0, 1.0]), gallery)) == [1, 2, 0]


@check('average precision and evaluation')
def _evaluate():
    _close(average_precision(np.array([True, False, True])), 0.5 * (1 + 2 / 3))
    rec = data_io.SampleRecord
    gallery = build_index([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])],
                          [rec('a', 1, 1, 'gallery'), rec('b', 2, 1, 'gallery')])
    queries = build_index([Tensor([1.0, 0.0])], [rec('q', 1, 0, 'query')])
    report = evaluate(queries, gallery, [1])
    _close([report.mAP, report.rank(1)], [1.0, 1.0])


@check('tensor file round trip and header size')
def _tensor_file():
    array = np.random.default_rng(2).normal(size=(3, 4, 5))
    decoded, _ = data_io.decode_tensor(data_io.encode_tensor(array))
    np.testing.assert_array_equal(decoded, array)
    assert len(data_io.encode_tensor(np.zeros((2, 2), dtype=np.float32))) == 16 + 16


@check('augmentation disabled is identity')
def _augment():
    image = np.random.default_rng(3).uniform(size=(8, 4, 3))
    cfg = data_io.AugmentConfig(resize_to=(8, 4), crop_to=(8, 4), hflip_prob=0.0, erase_prob=0.0,
                                erase_enabled=True)
    np.testing.assert_array_equal(data_io.augment(image, cfg, np.random.default_rng(0)).data, image)
    np.testing.assert_array_equal(data_io.hflip(data_io.hflip(image)).data, image)


@check('synthetic data and PPM ingestion')
def _synthetic():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = data_io.synth_generate(tmp, num_ids=2, per_id=1, cams=2, size=(4, 2), noise=0.0,
                                          seed=0, k_p=2, image_format='ppm')
        dataset = data_io.read_manifest(manifest)
        assert len(dataset.records) == 4
        image = data_io.load_sample(dataset.records[0], dataset.root)
        assert image.shape == (4, 2, 3)
        path = os.path.join(tmp, 'white.ppm')
        data_io.export_ppm(path, np.ones((1, 1, 3)))
        _close(data_io.import_ppm(path).data.ravel(), [1, 1, 1])


@check('lite model shapes and inference determinism')
def _model():
    model, _, _ = lite_model_case(0)
    images = [Tensor(np.random.default_rng(4).uniform(size=(8, 4, 3)))]
    out = ccan_forward(images, model)
    assert out.f_G.shape == (1, 8) and out.f_L.shape == (1, 8) and out.logits_G.shape == (1, 2)
    first, second = extract_features(images, model), extract_features(images, model)
    np.testing.assert_array_equal(first[0][0].data, second[0][0].data)
    np.testing.assert_array_equal(first[0][1].data, out.f_L.data[0])


def selftest() -> List[SelfTestRow]:
    rows = []
    for name, func in _CHECKS:
        try:
            with double_precision():
                func()
            rows.append(SelfTestRow(name, True))
        except Exception as e:
            rows.append(SelfTestRow(name, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"))
            logger.warning(f"selftest '{name}' failed: {e}")
    return rows
