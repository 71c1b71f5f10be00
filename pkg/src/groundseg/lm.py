"""Tiny multimodal causal language model.

Image tokens (projected global-feature grid cells) prefix the text tokens;
a 2-block pre-norm transformer produces logits and final hidden states.
Hidden states at seg-token positions, linearly projected, condition the
mask decoder. Decoding is greedy, so every path is deterministic.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelDims

PAD, BOS, EOS, IMG, SEG, UNK = "<pad>", "<bos>", "<eos>", "<img>", "<seg>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, IMG, SEG, UNK)

_WORD_RE = re.compile(r"<seg>|[a-z0-9]+|[^\w\s]")


def word_tokens(text: str) -> list[str]:
    """Case-folded word/punctuation tokens; the literal seg token survives."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    lookup: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the special tokens")
        self.lookup = {t: i for i, t in enumerate(self.tokens)}
        if len(self.lookup) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    img_id = property(lambda self: 3)
    seg_id = property(lambda self: 4)
    unk_id = property(lambda self: 5)

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, texts, size: int = 512) -> "Vocabulary":
        words = sorted({w for t in texts for w in word_tokens(t)} - set(SPECIAL_TOKENS))
        room = size - len(SPECIAL_TOKENS)
        if len(words) > room:
            words = words[:room]
        return cls(tokens=list(SPECIAL_TOKENS) + words)

    def encode(self, text: str) -> list[int]:
        return [self.lookup.get(w, self.unk_id) for w in word_tokens(text)]

    def decode(self, ids) -> str:
        drop = {self.pad_id, self.bos_id, self.eos_id, self.img_id}
        return " ".join(self.tokens[i] for i in ids if i not in drop)

    def to_json(self) -> str:
        return json.dumps({"specials": {t: i for i, t in enumerate(SPECIAL_TOKENS)},
                           "tokens": self.tokens})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tokens=json.loads(text)["tokens"])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocabulary) -> str:
    return vocab.decode(ids)


@dataclass
class MultimodalInput:
    image_tokens: np.ndarray  # (N_img, d) already projected into LM space
    text_ids: list[int]


@dataclass
class LMOutput:
    logits: np.ndarray   # (L, V)
    hiddens: np.ndarray  # (L, d)


@dataclass
class SegTokenEmbeddings:
    """Conditioning vectors for the mask decoder, in textual order."""

    vectors: np.ndarray        # (n, d_proj)
    positions: list[int]       # text-coordinate positions of the seg tokens

    def __len__(self):
        return self.vectors.shape[0]


def init_lm_params(dims: ModelDims, vocab_size: int, rng: np.random.Generator,
                   dtype=np.float32) -> dict[str, Tensor]:
    d = dims.embed_dim

    def mat(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    mat("lm.tok_emb", (vocab_size, d))
    mat("lm.pos_emb", (dims.context, d))
    out_std = 0.02 / np.sqrt(2.0 * dims.blocks)
    for i in range(dims.blocks):
        pre = f"lm.block{i}"
        ones(f"{pre}.ln1.g", d)
        zeros(f"{pre}.ln1.b", d)
        for nm in ("wq", "wk", "wv"):
            mat(f"{pre}.{nm}", (d, d))
        mat(f"{pre}.wo", (d, d), std=out_std)
        for nm in ("bq", "bk", "bv", "bo"):
            zeros(f"{pre}.{nm}", d)
        ones(f"{pre}.ln2.g", d)
        zeros(f"{pre}.ln2.b", d)
        hidden = dims.mlp_factor * d
        mat(f"{pre}.mlp_w1", (d, hidden))
        zeros(f"{pre}.mlp_b1", hidden)
        mat(f"{pre}.mlp_w2", (hidden, d), std=out_std)
        zeros(f"{pre}.mlp_b2", d)
    ones("lm.lnf.g", d)
    zeros("lm.lnf.b", d)
    mat("lm.head", (d, vocab_size))
    mat("mm.img_proj.w", (dims.channels, d))
    zeros("mm.img_proj.b", d)
    mat("mm.seg_proj.w", (d, dims.proj_dim))
    zeros("mm.seg_proj.b", dims.proj_dim)
    return params


def _causal_mask(length: int, dtype) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9, dtype=dtype), k=1)


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    b, l, d = x.shape
    dh = d // heads

    def proj(nm, bias):
        return ad.add(ad.matmul(x, p[f"{pre}.{nm}"]), p[f"{pre}.{bias}"])

    def split(t):
        return ad.transpose(ad.reshape(t, (b, l, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(proj("wq", "bq")), split(proj("wk", "bk")), split(proj("wv", "bv"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    Tensor(np.asarray(1.0 / np.sqrt(dh), x.data.dtype)))
    scores = ad.add(scores, Tensor(_causal_mask(l, x.data.dtype)))
    out = ad.matmul(ad.softmax(scores), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, l, d))
    return ad.add(ad.matmul(out, p[f"{pre}.wo"]), p[f"{pre}.bo"])


def _mlp(x: Tensor, p: dict[str, Tensor], pre: str) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{pre}.mlp_w1"]), p[f"{pre}.mlp_b1"]))
    return ad.add(ad.matmul(h, p[f"{pre}.mlp_w2"]), p[f"{pre}.mlp_b2"])


def project_image_tokens(v_g: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Global feature grid (B, c, g, g) -> image token embeddings (B, g*g, d)."""
    b, c, g, _ = v_g.shape
    cells = ad.reshape(ad.transpose(v_g, (0, 2, 3, 1)), (b, g * g, c))
    return ad.add(ad.matmul(cells, p["mm.img_proj.w"]), p["mm.img_proj.b"])


def lm_forward_batch(image_tokens: Tensor, text_ids: np.ndarray,
                     p: dict[str, Tensor], dims: ModelDims) -> tuple[Tensor, Tensor]:
    """Causal forward over [image tokens; text tokens]. Returns (logits, hiddens)."""
    b, n_img, _ = image_tokens.shape
    length = n_img + text_ids.shape[1]
    if length > dims.context:
        raise ValueError(f"sequence length {length} exceeds context {dims.context}")
    te = ad.embedding(p["lm.tok_emb"], text_ids)
    x = ad.concat([image_tokens, te], axis=1)
    x = ad.add(x, ad.take(p["lm.pos_emb"], np.arange(length)))
    for i in range(dims.blocks):
        pre = f"lm.block{i}"
        x = ad.add(x, _attention(ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]),
                                 p, pre, dims.heads))
        x = ad.add(x, _mlp(ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]), p, pre))
    h = ad.layer_norm(x, p["lm.lnf.g"], p["lm.lnf.b"])
    logits = ad.matmul(h, p["lm.head"])
    return logits, h


def lm_forward(inp: MultimodalInput, params: dict[str, Tensor], dims: ModelDims) -> LMOutput:
    """Single-example forward pass (numpy in / numpy out)."""
    ids = np.asarray(inp.text_ids, dtype=np.int64)[None]
    with ad.no_grad():
        logits, hiddens = lm_forward_batch(
            Tensor(np.asarray(inp.image_tokens)[None]), ids, params, dims)
    return LMOutput(logits=logits.data[0], hiddens=hiddens.data[0])


def extract_seg_embeddings(out: LMOutput, text_ids, answer_span, seg_id: int,
                           params: dict[str, Tensor]) -> SegTokenEmbeddings:
    """Project hidden states at seg-token positions inside the answer span.

    `answer_span` is (start, end) in text coordinates, end exclusive. The
    result is empty (legal) when the span holds no seg tokens.
    """
    ids = list(text_ids)
    n_img = out.hiddens.shape[0] - len(ids)
    start, end = answer_span
    if start < 0 or end > len(ids):
        raise ValueError("answer span outside the text region")
    positions = [j for j in range(start, end) if ids[j] == seg_id]
    w = params["mm.seg_proj.w"].data
    b = params["mm.seg_proj.b"].data
    if not positions:
        return SegTokenEmbeddings(vectors=np.zeros((0, w.shape[1]), dtype=w.dtype), positions=[])
    rows = out.hiddens[[n_img + j for j in positions]]
    return SegTokenEmbeddings(vectors=rows @ w + b, positions=positions)


def generate(image_tokens, prompt_ids, params: dict[str, Tensor], dims: ModelDims,
             max_len: int, eos_id: int) -> list[int]:
    """Greedy continuation of the prompt; stops at eos (excluded) or max_len."""
    ids = list(prompt_ids)
    out: list[int] = []
    img = Tensor(np.asarray(image_tokens)[None])
    n_img = np.asarray(image_tokens).shape[0]
    with ad.no_grad():
        for _ in range(max_len):
            # keep room so prompt + continuation can be re-forwarded later
            if n_img + len(ids) + 1 > dims.context:
                break
            arr = np.asarray(ids, dtype=np.int64)[None]
            logits, _ = lm_forward_batch(img, arr, params, dims)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out
