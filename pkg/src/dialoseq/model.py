"""Transformer seq2seq with an optional projected image feature.

Architecture (ledgered defaults): pre-norm residual blocks, learned
positional embeddings, ReLU feed-forward, token embedding shared between
encoder and decoder and tied to the output projection, init N(0, 0.02).

The image feature is a fixed 2048-dim vector; a trainable affine projection
maps it to d_model and the result is appended as one extra row AFTER the
final encoder state (it does not pass through the encoder layers and carries
no positional embedding). The decoder cross-attends over text states plus
that row.

Checkpoint files: one magic line, one JSON header line (format version,
model config, vocab hash, parameter manifest, training extras), then raw
little-endian float32 parameter blobs in manifest order. Reload reproduces
identical logits bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bpe
from . import tensor as T
from .corpus import FEATURE_DIM, Example
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

NEG = -1e9  # attention mask fill; finite so the NaN policy holds

CHECKPOINT_MAGIC = "dialoseq-checkpoint v1"


@dataclass
class ModelConfig:
    vocab_size: int
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    dropout: float = 0.1
    max_positions: int = 1024

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.vocab_size <= bpe.N_SPECIALS:
            raise ConfigError(f"vocab_size must exceed {bpe.N_SPECIALS}")


@dataclass
class EncoderOutput:
    states: Tensor            # (rows, d_model); rows = tokens (+1 with image)
    mask: np.ndarray          # (rows,) bool, True on valid positions

    @property
    def rows(self) -> int:
        return self.states.data.shape[0]


class TransformerSeq2Seq:
    def __init__(self, config: ModelConfig, vocab_hash: str = "", seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.vocab_hash = vocab_hash
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ params

    def _param(self, name: str, shape, rng, kind: str):
        if kind == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True)

    def _init_params(self, rng):
        c = self.config
        d = c.d_model
        self._param("tok_emb", (c.vocab_size, d), rng, "normal")
        self._param("pos_enc", (c.max_positions, d), rng, "normal")
        self._param("pos_dec", (c.max_positions, d), rng, "normal")
        self._param("img_w", (FEATURE_DIM, d), rng, "normal")
        self._param("img_b", (d,), rng, "zeros")
        for side, n_layers, blocks in (
            ("enc", c.n_encoder_layers, ("self",)),
            ("dec", c.n_decoder_layers, ("self", "cross")),
        ):
            for i in range(n_layers):
                p = f"{side}{i}."
                for j, blk in enumerate(blocks, start=1):
                    self._param(p + f"ln{j}_g", (d,), rng, "ones")
                    self._param(p + f"ln{j}_b", (d,), rng, "zeros")
                    for name in ("q", "k", "v", "o"):
                        self._param(p + f"{blk}_{name}w", (d, d), rng, "normal")
                        if name != "k":
                            # a key bias shifts every score in a row by the same
                            # q·c, which softmax cancels exactly: dead parameter
                            self._param(p + f"{blk}_{name}b", (d,), rng, "zeros")
                j = len(blocks) + 1
                self._param(p + f"ln{j}_g", (d,), rng, "ones")
                self._param(p + f"ln{j}_b", (d,), rng, "zeros")
                self._param(p + "ffn_w1", (d, c.d_ffn), rng, "normal")
                self._param(p + "ffn_b1", (c.d_ffn,), rng, "zeros")
                self._param(p + "ffn_w2", (c.d_ffn, d), rng, "normal")
                self._param(p + "ffn_b2", (d,), rng, "zeros")
            self._param(f"{side}_lnf_g", (d,), rng, "ones")
            self._param(f"{side}_lnf_b", (d,), rng, "zeros")

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def set_params(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            raise DataError("parameter name set does not match this model's config")
        for k, v in self.params.items():
            v.data = np.asarray(arrays[k], dtype=self.dtype).reshape(v.data.shape).copy()
            v.grad = np.zeros_like(v.data)

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    # ----------------------------------------------------------- blocks

    def _ln(self, x, prefix):
        return T.layer_norm(x, self.params[prefix + "_g"], self.params[prefix + "_b"])

    def _matmul_folded(self, x, weight):
        # fold the batch into rows: one large gemm beats numpy's per-slice
        # dispatch for stacked 3-D @ 2-D products
        if x.data.ndim == 3:
            b_, t_, d_ = x.data.shape
            flat = T.matmul(T.reshape(x, (b_ * t_, d_)), weight)
            return T.reshape(flat, (b_, t_, weight.data.shape[1]))
        return T.matmul(x, weight)

    def _proj(self, x, w, b):
        weight = self.params[w]
        if x.data.ndim == 3:
            b_, t_, d_ = x.data.shape
            flat = T.matmul(T.reshape(x, (b_ * t_, d_)), weight)
            return T.reshape(T.add(flat, self.params[b]), (b_, t_, weight.data.shape[1]))
        return T.add(T.matmul(x, weight), self.params[b])

    def _attention(self, xq, xkv, mask, prefix, training):
        """Multi-head attention; mask is broadcastable to (B, 1, Tq, Tk)."""
        c = self.config
        b_, tq, d = xq.data.shape
        tk = xkv.data.shape[1]
        dh = d // c.n_heads

        def heads(t, length):
            t = T.reshape(t, (b_, length, c.n_heads, dh))
            return T.transpose(t, (0, 2, 1, 3))

        q = heads(self._proj(xq, prefix + "_qw", prefix + "_qb"), tq)
        k = heads(self._matmul_folded(xkv, self.params[prefix + "_kw"]), tk)
        v = heads(self._proj(xkv, prefix + "_vw", prefix + "_vb"), tk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = T.masked_fill(scores, ~mask, NEG)
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b_, tq, d))
        out = self._proj(ctx, prefix + "_ow", prefix + "_ob")
        return T.dropout(out, c.dropout, self.rng, training)

    def _ffn(self, x, prefix, training):
        h = T.relu(self._proj(x, prefix + "ffn_w1", prefix + "ffn_b1"))
        h = self._proj(h, prefix + "ffn_w2", prefix + "ffn_b2")
        return T.dropout(h, self.config.dropout, self.rng, training)

    def _embed(self, ids: np.ndarray, pos_table: str, training: bool):
        length = ids.shape[-1]
        if length > self.config.max_positions:
            raise ShapeError(
                f"sequence length {length} exceeds max_positions {self.config.max_positions}; "
                "caller must truncate"
            )
        tok = T.embedding(self.params["tok_emb"], ids)
        pos = T.embedding(self.params[pos_table], np.arange(length))
        return T.dropout(T.add(tok, pos), self.config.dropout, self.rng, training)

    # ---------------------------------------------------------- batched

    def encode_batch(self, ctx_ids: np.ndarray, ctx_mask: np.ndarray,
                     feats: np.ndarray | None = None, training: bool = False):
        """(B, L) ids with a bool validity mask -> (states, mask) with the
        image row appended after the final encoder norm when feats given."""
        h = self._embed(ctx_ids, "pos_enc", training)
        key_mask = ctx_mask[:, None, None, :]
        for i in range(self.config.n_encoder_layers):
            p = f"enc{i}."
            x = self._ln(h, p + "ln1")
            h = T.add(h, self._attention(x, x, key_mask, p + "self", training))
            h = T.add(h, self._ffn(self._ln(h, p + "ln2"), p, training))
        h = self._ln(h, "enc_lnf")
        mask = ctx_mask
        if feats is not None:
            img = self.project_image_batch(feats)
            h = T.concat([h, T.reshape(img, (feats.shape[0], 1, self.config.d_model))], axis=1)
            mask = np.concatenate([ctx_mask, np.ones((ctx_mask.shape[0], 1), dtype=bool)], axis=1)
        return h, mask

    def decode_logits(self, dec_ids: np.ndarray, enc_states: Tensor,
                      enc_mask: np.ndarray, training: bool = False) -> Tensor:
        """(B, T) decoder input ids -> (B, T, V) logits under causal masking."""
        b_, t = dec_ids.shape
        h = self._embed(dec_ids, "pos_dec", training)
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None, :, :]
        cross_mask = enc_mask[:, None, None, :]
        for i in range(self.config.n_decoder_layers):
            p = f"dec{i}."
            x = self._ln(h, p + "ln1")
            h = T.add(h, self._attention(x, x, causal, p + "self", training))
            h = T.add(h, self._attention(self._ln(h, p + "ln2"), enc_states,
                                         cross_mask, p + "cross", training))
            h = T.add(h, self._ffn(self._ln(h, p + "ln3"), p, training))
        h = self._ln(h, "dec_lnf")
        # tied output projection: logits = h @ tok_emb^T, folded to 2-D
        flat = T.matmul(T.reshape(h, (b_ * t, self.config.d_model)),
                        T.transpose(self.params["tok_emb"]))
        return T.reshape(flat, (b_, t, self.config.vocab_size))

    def batch_nll(self, examples: list[Example], training: bool = False) -> Tensor:
        """Mean NLL per non-pad target token over a batch (token-weighted)."""
        if not examples:
            raise ConfigError("batch_nll: empty batch")
        pad = 0  # bpe pad id
        b_ = len(examples)
        lmax = max(len(ex.context_ids) for ex in examples)
        tmax = max(len(ex.target_ids) for ex in examples)
        ctx = np.full((b_, lmax), pad, dtype=np.int64)
        ctx_mask = np.zeros((b_, lmax), dtype=bool)
        dec_in = np.full((b_, tmax), pad, dtype=np.int64)
        targets = np.full((b_, tmax), pad, dtype=np.int64)
        with_image = [ex.image_feature is not None for ex in examples]
        if any(with_image) and not all(with_image):
            raise ConfigError("batch_nll: mixed image/non-image examples in one batch")
        feats = np.stack([ex.image_feature for ex in examples]) if all(with_image) else None
        for i, ex in enumerate(examples):
            n, m = len(ex.context_ids), len(ex.target_ids)
            ctx[i, :n] = ex.context_ids
            ctx_mask[i, :n] = True
            dec_in[i, 0] = 1  # bos
            dec_in[i, 1:m] = ex.target_ids[:-1]
            targets[i, :m] = ex.target_ids
        states, mask = self.encode_batch(ctx, ctx_mask, feats, training)
        logits = self.decode_logits(dec_in, states, mask, training)
        flat = T.reshape(logits, (b_ * tmax, self.config.vocab_size))
        return T.cross_entropy_nll(flat, targets.reshape(-1), ignore_index=pad)

    def nll_sums(self, examples: list[Example], chunk: int = 64) -> tuple[float, int]:
        """(total NLL, total target tokens) over examples, evaluated without grads."""
        total, count = 0.0, 0
        with T.no_grad():
            for i in range(0, len(examples), chunk):
                block = examples[i : i + chunk]
                n_tok = sum(len(ex.target_ids) for ex in block)
                mean = float(self.batch_nll(block, training=False).data)
                total += mean * n_tok
                count += n_tok
        return total, count

    # ------------------------------------------------------- per example

    def encode(self, context_ids, image_feature=None) -> EncoderOutput:
        ids = np.asarray(context_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError(f"encode: context must be a 1-D id sequence, got {ids.shape}")
        if ids.shape[0] > self.config.max_positions:
            raise ShapeError(
                f"encode: context of {ids.shape[0]} tokens exceeds max_positions "
                f"{self.config.max_positions}; caller must truncate"
            )
        feats = None
        if image_feature is not None:
            feat = np.asarray(image_feature, dtype=self.dtype)
            if feat.shape != (FEATURE_DIM,):
                raise ShapeError(f"encode: image feature must have length {FEATURE_DIM}")
            feats = feat[None, :]
        states, mask = self.encode_batch(ids[None, :], np.ones((1, len(ids)), dtype=bool), feats)
        rows = states.data.shape[1]
        return EncoderOutput(states=T.reshape(states, (rows, self.config.d_model)),
                             mask=mask[0])

    def decode_step(self, target_prefix_ids, enc: EncoderOutput) -> Tensor:
        prefix = np.asarray(target_prefix_ids, dtype=np.int64)
        if prefix.ndim != 1 or prefix.shape[0] == 0:
            raise ShapeError("decode_step: prefix must be a non-empty 1-D id sequence")
        if prefix[0] != 1:  # bos
            raise ShapeError("decode_step: prefix must begin with the start token")
        states = T.reshape(enc.states, (1,) + enc.states.data.shape)
        logits = self.decode_logits(prefix[None, :], states, enc.mask[None, :])
        return T.reshape(logits, (prefix.shape[0], self.config.vocab_size))

    def next_logits(self, prefix_ids, enc: EncoderOutput) -> np.ndarray:
        with T.no_grad():
            return self.decode_step(prefix_ids, enc).data[-1].copy()

    def forward_nll(self, example: Example, training: bool = False) -> Tensor:
        """Mean NLL per target token; exp() of it is this example's perplexity."""
        return self.batch_nll([example], training=training)

    def project_image(self, feature) -> Tensor:
        feat = np.asarray(feature, dtype=self.dtype)
        if feat.shape != (FEATURE_DIM,):
            raise ShapeError(
                f"project_image: expected a {FEATURE_DIM}-vector, got shape {feat.shape}"
            )
        return T.reshape(self.project_image_batch(feat[None, :]), (self.config.d_model,))

    def project_image_batch(self, feats: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(feats, dtype=self.dtype))
        return T.add(T.matmul(t, self.params["img_w"]), self.params["img_b"])


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: TransformerSeq2Seq, moments: dict | None = None,
                    step: int = 0, best: dict | None = None, config_echo: str = ""):
    names = list(model.params)
    header = {
        "model_config": asdict(model.config),
        "vocab_hash": model.vocab_hash,
        "params": [[n, list(model.params[n].data.shape)] for n in names],
        "has_moments": moments is not None,
        "step": step,
        "best": best,
        "config_echo": config_echo,
    }
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for n in names:
            f.write(model.params[n].data.astype("<f4").tobytes())
        if moments is not None:
            for part in ("m", "v"):
                for n in names:
                    f.write(moments[part][n].astype("<f4").tobytes())


@dataclass
class CheckpointData:
    model_config: ModelConfig
    vocab_hash: str
    params: dict[str, np.ndarray]
    moments: dict | None
    step: int
    best: dict | None
    config_echo: str = ""

    def build_model(self, dtype=np.float32, seed: int = 0) -> TransformerSeq2Seq:
        m = TransformerSeq2Seq(self.model_config, vocab_hash=self.vocab_hash,
                               seed=seed, dtype=dtype)
        m.set_params(self.params)
        return m


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        magic = f.readline().decode().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a dialoseq checkpoint (found {magic!r})")
        header = json.loads(f.readline().decode())
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            raw = f.read(n * 4)
            if len(raw) != n * 4:
                raise DataError(f"{path}: truncated blob for parameter '{name}'")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        moments = None
        if header["has_moments"]:
            moments = {"m": {}, "v": {}}
            for part in ("m", "v"):
                for name, shape in header["params"]:
                    n = int(np.prod(shape))
                    raw = f.read(n * 4)
                    if len(raw) != n * 4:
                        raise DataError(f"{path}: truncated moment blob for '{name}'")
                    moments[part][name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return CheckpointData(
        model_config=ModelConfig(**header["model_config"]),
        vocab_hash=header["vocab_hash"],
        params=params,
        moments=moments,
        step=header["step"],
        best=header["best"],
        config_echo=header.get("config_echo", ""),
    )
