"""Finite-difference verification suite for every differentiable op and the
composite losses, run at float64.  Backs the ``colo gradcheck`` command."""

from dataclasses import dataclass

import numpy as np

from . import contrastive as K
from . import model as M
from . import tensor as T
from .corpus import Corpus, CorpusConfig, Vocab, generate_corpus
from .rng import derive_rng
from .tensor import Tensor, finite_diff_check

OP_THRESHOLD = 1e-4
COMPOSITE_THRESHOLD = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self):
        return self.max_rel_err < self.threshold


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _const(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def op_checks():
    """(name, err) for each primitive op, float64 central differences."""
    rng = np.random.default_rng(2024)
    w = _const(rng, 3, 4)
    cases = []

    bias4 = _const(rng, 4)
    other34 = _const(rng, 3, 4)
    cases.append(("add_broadcast", finite_diff_check(lambda x: T.sum_(T.mul(T.add(x, bias4), w)), _t(rng, 3, 4))))
    cases.append(("sub", finite_diff_check(lambda x: T.sum_(T.mul(T.sub(x, other34), w)), _t(rng, 3, 4))))
    cases.append(("mul", finite_diff_check(lambda x: T.sum_(T.mul(T.mul(x, other34), w)), _t(rng, 3, 4))))
    pos = Tensor(np.abs(np.random.default_rng(8).standard_normal((3, 4))) + 0.5, requires_grad=True, dtype=np.float64)
    cases.append(("div", finite_diff_check(lambda x: T.sum_(T.mul(T.div(other34, x), w)), pos)))
    cases.append(("neg", finite_diff_check(lambda x: T.sum_(T.mul(T.neg(x), w)), _t(rng, 3, 4))))
    sq = Tensor(np.abs(np.random.default_rng(9).standard_normal((3, 4))) + 0.5, requires_grad=True, dtype=np.float64)
    cases.append(("sqrt", finite_diff_check(lambda x: T.sum_(T.mul(T.sqrt(x), w)), sq)))
    cases.append(("tanh", finite_diff_check(lambda x: T.sum_(T.mul(T.tanh(x), w)), _t(rng, 3, 4))))
    off = Tensor(np.random.default_rng(10).standard_normal((3, 4)) + 0.7, requires_grad=True, dtype=np.float64)
    cases.append(("relu", finite_diff_check(lambda x: T.sum_(T.mul(T.relu(x), w)), off)))
    cases.append(("gelu", finite_diff_check(lambda x: T.sum_(T.mul(T.gelu(x), w)), _t(rng, 3, 4))))

    b42 = _const(rng, 4, 2)
    w32 = _const(rng, 3, 2)
    cases.append(("matmul_2d", finite_diff_check(lambda x: T.sum_(T.mul(T.matmul(x, b42), w32)), _t(rng, 3, 4))))
    wb = _const(rng, 2, 3, 2)
    cases.append(("matmul_batched", finite_diff_check(lambda x: T.sum_(T.mul(T.matmul(x, b42), wb)), _t(rng, 2, 3, 4))))
    a54 = _const(rng, 5, 4)
    w52 = _const(rng, 5, 2)
    cases.append(("matmul_rhs", finite_diff_check(lambda x: T.sum_(T.mul(T.matmul(a54, x), w52)), _t(rng, 4, 2))))

    w3 = _const(rng, 3)
    w43 = _const(rng, 4, 3)
    cases.append(("sum_axis", finite_diff_check(lambda x: T.sum_(T.mul(T.sum_(x, axis=1), w3)), _t(rng, 3, 4))))
    cases.append(("reshape", finite_diff_check(lambda x: T.sum_(T.mul(T.reshape(x, (4, 3)), w43)), _t(rng, 3, 4))))
    cases.append(("swapaxes", finite_diff_check(lambda x: T.sum_(T.mul(T.swapaxes(x, 0, 1), w43)), _t(rng, 3, 4))))

    table = _t(rng, 6, 4)
    ids = np.array([0, 2, 2, 5])
    w44 = _const(rng, 4, 4)
    cases.append(("take_rows", finite_diff_check(lambda x: T.sum_(T.mul(T.take_rows(x, ids), w44)), table)))

    w36 = _const(rng, 3, 6)
    cases.append(("softmax", finite_diff_check(lambda x: T.sum_(T.mul(T.softmax_last(x), w36)), _t(rng, 3, 6))))

    gain = _const(rng, 8)
    bias = _const(rng, 8)
    wln = _const(rng, 4, 8)
    cases.append(("layer_norm_x", finite_diff_check(lambda x: T.sum_(T.mul(T.layer_norm(x, gain, bias), wln)), _t(rng, 4, 8))))
    x_fixed = _const(rng, 4, 8)
    cases.append(("layer_norm_gain", finite_diff_check(lambda g: T.sum_(T.mul(T.layer_norm(x_fixed, g, bias), wln)), _t(rng, 8))))
    cases.append(("layer_norm_bias", finite_diff_check(lambda b: T.sum_(T.mul(T.layer_norm(x_fixed, gain, b), wln)), _t(rng, 8))))

    targets = np.array([3, 0, 7, 2, 9, 5])
    lmask = np.array([True, True, False, True, True, True])
    cases.append(
        ("softmax_cross_entropy", finite_diff_check(lambda x: T.softmax_cross_entropy(x, targets, lmask), _t(rng, 6, 11)))
    )

    pmask = np.array([True, False, True, True, False])
    w8 = _const(rng, 8)
    cases.append(
        ("masked_mean_pool", finite_diff_check(lambda x: T.sum_(T.mul(T.masked_mean_pool(x, pmask), w8)), _t(rng, 5, 8)))
    )

    v_fixed = _const(rng, 6)
    cases.append(("cosine_similarity", finite_diff_check(lambda u: T.cosine_similarity(u, v_fixed), _t(rng, 6))))
    return cases


def _micro_fixture():
    cfg = CorpusConfig(
        n_entities=3,
        n_aspects=2,
        n_opinions=2,
        n_aliases_per_item=1,
        n_attrs_per_category=2,
        n_examples=4,
        split_ratio=(0.5, 0.25, 0.25),
        distractor_range=(0, 1),
        profile_attrs_range=(1, 1),
        ref_len_bounds=(12, 26),
        seed=99,
    )
    lexicon, examples = generate_corpus(cfg)
    vocab = Vocab.build(lexicon)
    mcfg = M.ModelConfig(
        vocab_size=len(vocab),
        d_model=8,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        d_ff=16,
        max_src_len=16,
        max_tgt_len=26,
        dropout_rate=0.0,
        proj_hidden=8,
    )
    params = M.init_params(mcfg, seed=5, dtype=np.float64)
    # scaled-normal init keeps attention near-symmetric, which drives many
    # gradient coordinates toward zero and lets finite-difference roundoff
    # dominate the relative error; a fixed bump makes every path substantive
    bump = derive_rng(17)
    for name in params.names():
        params[name].data += bump.standard_normal(params[name].shape) * 0.1
    return Corpus(lexicon, examples), vocab, mcfg, params


def composite_checks(max_err_only=False):
    """Check lm/ce/cd/total gradients for every parameter of a micro model."""
    corpus, vocab, mcfg, params = _micro_fixture()
    examples = corpus.examples[:2]
    csets = [
        K.build_contrastive_set(ex.tuple, corpus.lexicon, derive_rng(31, i))
        for i, ex in enumerate(examples)
    ]

    def loss_fn(component):
        def f(_):
            bd = K.total_loss_batch(
                params, mcfg, examples, csets, corpus.lexicon, vocab, train=False
            )
            return getattr(bd, component)

        return f

    results = []
    for component in ("lm", "ce", "cd", "total"):
        worst = 0.0
        f = loss_fn(component)
        for name in params.names():
            err = finite_diff_check(f, params[name], eps=1e-5)
            worst = max(worst, err)
        results.append((f"composite_{component}", worst))
    return results


def run_all():
    results = [CheckResult(name, err, OP_THRESHOLD) for name, err in op_checks()]
    results += [CheckResult(name, err, COMPOSITE_THRESHOLD) for name, err in composite_checks()]
    return results
