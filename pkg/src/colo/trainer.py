"""Training loop: Adam updates, gradient clipping, checkpoints, quick evals.

Every random draw is derived from (seed, stream, step/epoch/example) keys,
so two runs with the same config produce bitwise-identical parameters and a
run resumed from a checkpoint matches the uninterrupted run exactly.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import contrastive as K
from . import evaluation as E
from . import kernels
from . import model as M
from . import rng as rngmod
from . import tokens as tok
from .corpus import Vocab
from .decoding import greedy_decode
from .tensor import Tape, backward, no_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"COLO"
CHECKPOINT_VERSION = 1

QUICK_EVAL_LM_EXAMPLES = 64
QUICK_EVAL_DECODE_EXAMPLES = 16


class NumericError(Exception):
    """Training hit a non-finite loss."""


class CheckpointError(Exception):
    """Checkpoint file is malformed, truncated, or version-mismatched."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    gamma: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    use_ce: bool = True
    use_cd: bool = True
    grad_clip_norm: float = 1.0
    eval_every: int = 200  # steps; 0 disables quick evals
    neg_types: tuple = ("ES", "AS", "OS")
    project_in_ce: bool = False
    max_steps: int = 0  # 0 means run all epochs

    def __post_init__(self):
        if self.learning_rate <= 0 or self.gamma <= 0:
            raise ValueError("learning_rate and gamma must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["neg_types"] = list(self.neg_types)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["neg_types"] = tuple(d.get("neg_types", ("ES", "AS", "OS")))
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def adam_update(params, grads, state: AdamState, lr):
    """Bias-corrected Adam step, in place, in sorted parameter order."""
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, t in params.items():
        g = grads[name]
        kernels.adam_step(
            t.data.reshape(-1),
            g.reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            lr,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            c1,
            c2,
        )


def clip_gradients(grads, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    sq = 0.0
    for g in grads.values():
        flat = g.reshape(-1)
        sq += float(flat @ flat)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class Checkpoint:
    model_config: M.ModelConfig
    params: M.ParameterSet
    adam: AdamState
    train_config: TrainConfig
    rng_state: dict  # integers: root seed and global step
    step: int


# ---------------------------------------------------------------------------
# checkpoint file format: magic, version, header JSON, raw LE payloads


def _dtype_tag(arr):
    return {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}[arr.dtype]


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = []
    for name, t in ckpt.params.items():
        arrays.append((f"param/{name}", t.data))
    for name in ckpt.params.names():
        arrays.append((f"adam_m/{name}", ckpt.adam.m[name]))
        arrays.append((f"adam_v/{name}", ckpt.adam.v[name]))

    manifest = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * arr.itemsize
        manifest.append(
            {
                "name": name,
                "dtype": _dtype_tag(arr),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "adam_step": ckpt.adam.step,
        "rng": {k: int(v) for k, v in ckpt.rng_state.items()},
        "step": ckpt.step,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("ascii")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header_end = 16 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:header_end].decode("ascii"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None

    payload = raw[header_end:]
    arrays = {}
    for entry in header["manifest"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        dt = np.dtype("<" + entry["dtype"])
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))

    mcfg = M.ModelConfig(**header["model_config"])
    tcfg = TrainConfig.from_dict(header["train_config"])
    from .tensor import Tensor

    tensors = {}
    m, v = {}, {}
    for name, arr in arrays.items():
        kind, pname = name.split("/", 1)
        if kind == "param":
            tensors[pname] = Tensor(arr.copy(), requires_grad=True)
        elif kind == "adam_m":
            m[pname] = arr.copy()
        elif kind == "adam_v":
            v[pname] = arr.copy()
    params = M.ParameterSet(tensors)
    adam = AdamState(m=m, v=v, step=header["adam_step"])
    return Checkpoint(mcfg, params, adam, tcfg, dict(header["rng"]), header["step"])


# ---------------------------------------------------------------------------
# training


def _quick_eval(params, mcfg, valid, lexicon, vocab):
    lm = E.perplexity(params, mcfg, valid[:QUICK_EVAL_LM_EXAMPLES], lexicon, vocab)
    sample = valid[:QUICK_EVAL_DECODE_EXAMPLES]
    covers, entails = [], []
    from .corpus import encode_example

    for ex in sample:
        enc = encode_example(ex, lexicon, vocab, mcfg.max_src_len)
        pred = vocab.detokenize([i for i in greedy_decode(params, mcfg, enc.src_ids) if i != tok.EOS_ID])
        covers.append(E.coverage(pred, ex.tuple, lexicon))
        entails.append(E.entail_oracle(pred, ex.tuple, lexicon))
    return {
        "valid_ppl": lm,
        "valid_cover": float(np.mean(covers)),
        "valid_entail": float(np.mean(entails)),
    }


def train(tcfg: TrainConfig, corpus, mcfg: M.ModelConfig, params=None, adam=None, start_step=0, log_file=None):
    """Run the optimization loop; returns (Checkpoint, list of log records).

    ``corpus`` is a :class:`colo.corpus.Corpus`.  Passing ``params``/``adam``
    /``start_step`` from a loaded checkpoint resumes bitwise-exactly.
    """
    lexicon = corpus.lexicon
    vocab = Vocab.build(lexicon)
    train_ex = corpus.train
    valid_ex = corpus.valid
    if not train_ex or not valid_ex:
        raise ValueError("corpus needs non-empty train and valid splits")
    if params is None:
        params = M.init_params(mcfg, tcfg.seed)
    if adam is None:
        adam = AdamState.init(params)

    steps_per_epoch = math.ceil(len(train_ex) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    if tcfg.max_steps:
        total_steps = min(total_steps, tcfg.max_steps)

    records = []

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    order = None
    order_epoch = -1
    for step in range(start_step, total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != order_epoch:
            order = rngmod.derive_rng(tcfg.seed, rngmod.ORDER, epoch).permutation(len(train_ex))
            order_epoch = epoch
        batch_idx = order[pos * tcfg.batch_size : (pos + 1) * tcfg.batch_size]
        batch = [train_ex[i] for i in batch_idx]
        csets = [
            K.build_contrastive_set(
                ex.tuple, lexicon, rngmod.derive_rng(tcfg.seed, rngmod.CONTRAST, epoch, int(i))
            )
            for i, ex in zip(batch_idx, batch)
        ]
        drop_rng = rngmod.derive_rng(tcfg.seed, rngmod.DROPOUT, step)

        params.zero_grads()
        with Tape():
            try:
                breakdown = K.total_loss_batch(
                    params,
                    mcfg,
                    batch,
                    csets,
                    lexicon,
                    vocab,
                    gamma=tcfg.gamma,
                    use_ce=tcfg.use_ce,
                    use_cd=tcfg.use_cd,
                    neg_types=tcfg.neg_types,
                    project_in_ce=tcfg.project_in_ce,
                    train=True,
                    rng=drop_rng,
                )
            except K.InvalidLossError as e:
                raise NumericError(f"non-finite loss at step {step}: {e}") from None
            vals = breakdown.values()
            if not all(math.isfinite(x) for x in vals.values()):
                raise NumericError(f"non-finite loss at step {step}: {vals}")
            backward(breakdown.total)

        grads = {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()
        }
        norm = clip_gradients(grads, tcfg.grad_clip_norm)
        adam_update(params, grads, adam, tcfg.learning_rate)

        rec = {"type": "train", "step": step, "epoch": epoch, "grad_norm": norm}
        rec.update(vals)
        emit(rec)

        if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            with no_grad():
                q = _quick_eval(params, mcfg, valid_ex, lexicon, vocab)
            q.update({"type": "eval", "step": step})
            emit(q)

    ckpt = Checkpoint(
        model_config=mcfg,
        params=params,
        adam=adam,
        train_config=tcfg,
        rng_state={"seed": tcfg.seed, "step": total_steps},
        step=total_steps,
    )
    return ckpt, records
