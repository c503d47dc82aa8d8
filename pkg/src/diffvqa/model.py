"""Toy-scale two-image VQA model.

Both images go through one shared conv encoder and projector.  The question
is embedded with the decoder's token table and a small transformer encoder.
A GPT-2 style causal decoder then reads one flat sequence

    <img> Z_main <img> Z_ref <qtn> Z_qtn <ans> answer... <eos> <pad>...

and is trained with teacher forcing on the answer slots only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .registration import AffinePredictor
from .saliency import CamTarget
from .synthdata import ANSWERS, CHANGES, COLS, KINDS, QUESTIONS, ROWS
from .tensor import Tensor
from .text import detokenize, tokenize

SPECIALS = ("<pad>", "<img>", "<qtn>", "<ans>", "<eos>")
PAD, IMG, QTN, ANS, EOS = range(5)
# slots in a layout that hold features rather than token ids
FEATURE_SLOT = -1


class Vocabulary:
    """Token strings <-> ids with the five special tokens at ids 0..4."""

    def __init__(self, words: Sequence[str]):
        words = [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.tokens = list(SPECIALS) + list(words)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Vocabulary":
        return cls(sorted({tok for t in texts for tok in tokenize(t)}))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        """Raises KeyError on an out-of-vocabulary token."""
        return [self.ids[tok] for tok in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = [self.tokens[i] for i in ids if i >= len(SPECIALS)]
        return detokenize(words)


def synthetic_vocabulary() -> Vocabulary:
    """Every token the synthetic generator can put in a question or answer."""
    texts = []
    for kind in KINDS:
        for row in ROWS:
            for col in COLS:
                for change in CHANGES:
                    texts.append(ANSWERS[change].format(kind=kind, zone=f"{col} {row}"))
        texts.extend(q.format(kind=kind) for q in QUESTIONS)
    return Vocabulary.build(texts)


@dataclass(frozen=True)
class ModelConfig:
    """Model shapes.

    ``toy()`` is what gets trained here.  ``paper()`` records the full-scale
    shapes (ResNet-50 stage-4 map of a 224 input, 8-head projector, six
    12-head text layers, GPT-2 small decoder) for reference only.
    """

    image_size: int = 64
    in_channels: int = 1
    enc_channels: tuple[int, ...] = (16, 32, 64, 128)
    d_model: int = 128
    proj_heads: int = 4
    text_layers: int = 1
    text_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    max_question_len: int = 16
    max_answer_len: int = 16
    vocab_size: int = 0
    reg_channels: tuple[int, ...] = (8, 16)
    cam_layer: int = -1

    def __post_init__(self):
        dims = (self.image_size, self.in_channels, self.d_model, self.proj_heads, self.text_heads,
                self.dec_heads, self.dec_layers, self.mlp_ratio, self.max_question_len,
                self.max_answer_len)
        if min(dims) <= 0 or self.text_layers < 0 or not self.enc_channels:
            raise ValueError("model dimensions must be positive")
        for h in (self.proj_heads, self.text_heads, self.dec_heads):
            if self.d_model % h:
                raise ValueError(f"d_model {self.d_model} not divisible by {h} heads")
        if self.image_size % (2 ** len(self.enc_channels)):
            raise ValueError("image size must be divisible by the encoder stride")
        if not -len(self.enc_channels) <= self.cam_layer < len(self.enc_channels):
            raise ValueError("cam_layer must index an encoder block")
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "reg_channels", tuple(self.reg_channels))

    @property
    def feature_size(self) -> int:
        return self.image_size // (2 ** len(self.enc_channels))

    @property
    def n_tokens(self) -> int:
        return self.feature_size ** 2

    @property
    def channels(self) -> int:
        return self.enc_channels[-1]

    @property
    def max_seq_len(self) -> int:
        return 2 * self.n_tokens + self.max_question_len + self.max_answer_len + 5

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def paper(cls, vocab_size: int = 50257) -> "ModelConfig":
        return cls(image_size=224, in_channels=3, enc_channels=(256, 512, 1024, 2048, 2048),
                   d_model=768, proj_heads=8, text_layers=6, text_heads=12, dec_layers=12,
                   dec_heads=12, max_question_len=64, max_answer_len=64, vocab_size=vocab_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["reg_channels"] = list(self.reg_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        d["reg_channels"] = tuple(d["reg_channels"])
        return cls(**d)


@dataclass
class SequenceLayout:
    embeddings: Tensor
    ids: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray
    ans_pos: np.ndarray

    def target_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """(batch, slot) of every loss position."""
        return np.nonzero(self.loss_mask)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        blocks = []
        c_prev = cfg.in_channels
        for c in cfg.enc_channels:
            blocks.append(nn.Conv2d(c_prev, c, 3, rng, stride=2, pad=1))
            c_prev = c
        self.blocks = blocks
        self.cam_layer = cfg.cam_layer % len(blocks)

    def features(self, img: Tensor, stop: int | None = None) -> Tensor:
        """Activations after block ``stop`` (inclusive); all blocks by default."""
        stop = len(self.blocks) - 1 if stop is None else stop
        h = img
        for conv in self.blocks[:stop + 1]:
            h = T.relu(conv(h))
        return h

    def finish(self, h: Tensor, start: int) -> Tensor:
        for conv in self.blocks[start + 1:]:
            h = T.relu(conv(h))
        return h


class Projector(nn.Module):
    """Linear C->D, one self-attention block, two-layer relu MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.inp = nn.Linear(cfg.channels, cfg.d_model, rng)
        self.block = nn.EncoderBlock(cfg.d_model, cfg.proj_heads, rng, cfg.mlp_ratio)
        self.mlp = nn.MLP(cfg.d_model, cfg.d_model * 2, cfg.d_model, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.mlp(self.block(self.inp(tokens)))


def _table(rng: np.random.Generator, rows: int, d: int, std: float) -> Tensor:
    return nn.parameter(rng.normal(0.0, std, size=(rows, d)))


class DiffVQAModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.vocab_size <= len(SPECIALS):
            raise ValueError("vocab_size must exceed the special tokens")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.predictor = AffinePredictor(cfg.in_channels, cfg.reg_channels, rng)
        self.encoder = ImageEncoder(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.embed = _table(rng, cfg.vocab_size, cfg.d_model, 0.02)
        self.q_pos = _table(rng, cfg.max_question_len, cfg.d_model, 0.01)
        self.text_blocks = [nn.EncoderBlock(cfg.d_model, cfg.text_heads, rng, cfg.mlp_ratio)
                            for _ in range(cfg.text_layers)]
        self.text_ln = nn.LayerNorm(cfg.d_model)
        self.dec_pos = _table(rng, cfg.max_seq_len, cfg.d_model, 0.01)
        self.dec_blocks = [nn.DecoderBlock(cfg.d_model, cfg.dec_heads, rng, cfg.mlp_ratio)
                           for _ in range(cfg.dec_layers)]
        self.dec_ln = nn.LayerNorm(cfg.d_model)

    # -- encoders ----------------------------------------------------------------

    def _check_images(self, img: Tensor) -> None:
        c, s = self.cfg.in_channels, self.cfg.image_size
        if img.ndim != 4 or img.shape[1:] != (c, s, s):
            raise ValueError(f"expected B×{c}×{s}×{s} images, got {img.shape}")

    def tokens_from_map(self, fmap: Tensor) -> Tensor:
        B, C, h, w = fmap.shape
        return fmap.transpose(0, 2, 3, 1).reshape(B, h * w, C)

    def encode_image(self, img: Tensor) -> Tensor:
        """B×1×H×W -> B×N×C tokens in row-major spatial order."""
        self._check_images(img)
        return self.tokens_from_map(self.encoder.features(img))

    def project(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.channels:
            raise ValueError(f"expected B×N×{self.cfg.channels} tokens, got {tokens.shape}")
        return self.projector(tokens)

    def image_tokens(self, main: Tensor, ref: Tensor) -> tuple[Tensor, Tensor]:
        """Projected tokens of both images, encoded together as one batch."""
        self._check_images(main)
        self._check_images(ref)
        B = main.shape[0]
        z = self.project(self.encode_image(T.concat([main, ref], axis=0)))
        return z[:B], z[B:]

    def _pad_questions(self, questions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        lens = np.array([len(q) for q in questions], dtype=np.int64)
        if lens.min() < 1 or lens.max() > self.cfg.max_question_len:
            raise ValueError(f"question length must be in 1..{self.cfg.max_question_len}")
        ids = np.full((len(questions), int(lens.max())), PAD, dtype=np.int64)
        for b, q in enumerate(questions):
            ids[b, :len(q)] = q
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise IndexError("question id outside the vocabulary")
        return ids, lens

    def encode_text(self, questions: Sequence[Sequence[int]]) -> Tensor:
        """B×L×D encodings of right-padded questions (pad keys masked out)."""
        ids, lens = self._pad_questions(questions)
        B, L = ids.shape
        x = T.embedding(self.embed, ids) + T.embedding(self.q_pos, np.tile(np.arange(L), (B, 1)))
        keys = (np.arange(L)[None, :] < lens[:, None])[:, None, None, :]
        for blk in self.text_blocks:
            x = blk(x, keys)
        return self.text_ln(x)

    # -- decoder -----------------------------------------------------------------

    def layout(self, z_main: Tensor, z_ref: Tensor, z_q: Tensor, q_lens: Sequence[int],
               answers: Sequence[Sequence[int]], eos: bool = True) -> SequenceLayout:
        B, N, D = z_main.shape
        Lq = z_q.shape[1]
        V = self.cfg.vocab_size
        off_main, off_ref, off_q = V, V + B * N, V + 2 * B * N
        rows, ids, masks = [], [], []
        for b in range(B):
            ans = list(answers[b]) + ([EOS] if eos else [])
            r = ([IMG] + [off_main + b * N + i for i in range(N)]
                 + [IMG] + [off_ref + b * N + i for i in range(N)]
                 + [QTN] + [off_q + b * Lq + j for j in range(q_lens[b])] + [ANS] + ans)
            t = ([IMG] + [FEATURE_SLOT] * N + [IMG] + [FEATURE_SLOT] * N
                 + [QTN] + [FEATURE_SLOT] * q_lens[b] + [ANS] + ans)
            m = [False] * (len(r) - len(ans)) + [True] * len(ans)
            rows.append(r)
            ids.append(t)
            masks.append(m)
        lengths = np.array([len(r) for r in rows])
        S = int(lengths.max())
        if S > self.cfg.max_seq_len:
            raise ValueError(f"sequence of {S} slots exceeds max_seq_len {self.cfg.max_seq_len}")
        row_arr = np.full((B, S), PAD, dtype=np.int64)
        id_arr = np.full((B, S), PAD, dtype=np.int64)
        mask_arr = np.zeros((B, S), dtype=bool)
        for b in range(B):
            n = lengths[b]
            row_arr[b, :n] = rows[b]
            id_arr[b, :n] = ids[b]
            mask_arr[b, :n] = masks[b]
        pool = T.concat([self.embed, z_main.reshape(B * N, D), z_ref.reshape(B * N, D),
                         z_q.reshape(B * Lq, D)], axis=0)
        x = T.embedding(pool, row_arr) + T.embedding(self.dec_pos, np.tile(np.arange(S), (B, 1)))
        ans_pos = np.array([2 * N + 3 + q_lens[b] for b in range(B)])
        return SequenceLayout(x, id_arr, mask_arr, lengths, ans_pos)

    def decode(self, layout: SequenceLayout) -> Tensor:
        x = layout.embeddings
        mask = nn.causal_mask(x.shape[1])
        for blk in self.dec_blocks:
            x = blk(x, mask)
        return x

    def logits_at(self, hidden: Tensor, b_idx: np.ndarray, s_idx: np.ndarray) -> Tensor:
        """Next-token logits (tied to the embedding table) at slots (b, s)."""
        B, S, D = hidden.shape
        sel = hidden.reshape(B * S, D)[np.asarray(b_idx) * S + np.asarray(s_idx)]
        return T.linear(self.dec_ln(sel), T.transpose(self.embed))

    def decode_teacher_forced(self, layout: SequenceLayout) -> tuple[Tensor, Tensor]:
        """Logits for every loss slot (predicted from the slot before) and L_LM."""
        b_idx, s_idx = layout.target_rows()
        if b_idx.size == 0:
            raise ValueError("layout has an empty loss mask")
        hidden = self.decode(layout)
        logits = self.logits_at(hidden, b_idx, s_idx - 1)
        return logits, T.cross_entropy(logits, layout.ids[b_idx, s_idx])

    # -- full passes ---------------------------------------------------------------

    def context(self, main: Tensor, ref: Tensor, questions: Sequence[Sequence[int]]):
        z_main, z_ref = self.image_tokens(main, ref)
        z_q = self.encode_text(questions)
        return z_main, z_ref, z_q, [len(q) for q in questions]

    def lm_loss(self, main: Tensor, ref: Tensor, questions: Sequence[Sequence[int]],
                answers: Sequence[Sequence[int]]) -> Tensor:
        z_main, z_ref, z_q, q_lens = self.context(main, ref, questions)
        _, loss = self.decode_teacher_forced(self.layout(z_main, z_ref, z_q, q_lens, answers))
        return loss

    def generate(self, main: Tensor, ref: Tensor, questions: Sequence[Sequence[int]],
                 max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding from <ans> until <eos> or ``max_len`` tokens."""
        max_len = self.cfg.max_answer_len if max_len is None else max_len
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        B = main.shape[0]
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        banned = np.array([PAD, IMG, QTN, ANS])
        with T.no_grad():
            z_main, z_ref, z_q, q_lens = self.context(main, ref, questions)
            for _ in range(max_len):
                lay = self.layout(z_main, z_ref, z_q, q_lens, out, eos=False)
                hidden = self.decode(lay)
                logits = self.logits_at(hidden, np.arange(B), lay.lengths - 1).data.copy()
                logits[:, banned] = -np.inf
                nxt = logits.argmax(axis=1)
                for b in range(B):
                    if done[b]:
                        continue
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
                if done.all():
                    break
        return out

    # -- saliency hook --------------------------------------------------------------

    def cam_score(self, main: Tensor, ref: Tensor, questions: Sequence[Sequence[int]],
                  targets: Sequence[CamTarget]):
        """Teacher-forced log-prob sum of the keyword tokens, with the chosen
        conv layer's maps for both images exposed as grad-requiring leaves.

        Call inside ``frozen()`` so only activation gradients are formed.
        """
        B = main.shape[0]
        imgs = Tensor(np.concatenate([main.data, ref.data], axis=0))
        self._check_images(imgs)
        layer = self.encoder.cam_layer
        fmap = self.encoder.features(imgs, layer).data
        feat_main = Tensor(fmap[:B], requires_grad=True)
        feat_ref = Tensor(fmap[B:], requires_grad=True)
        h = self.encoder.finish(T.concat([feat_main, feat_ref], axis=0), layer)
        z = self.project(self.tokens_from_map(h))
        z_q = self.encode_text(questions)
        answers = [t.answer_ids for t in targets]
        lay = self.layout(z[:B], z[B:], z_q, [len(q) for q in questions], answers)
        hidden = self.decode(lay)
        b_idx = np.concatenate([[b] * len(t.positions) for b, t in enumerate(targets)])
        s_idx = np.concatenate([[lay.ans_pos[b] + 1 + p for p in t.positions]
                                for b, t in enumerate(targets)])
        kw = np.concatenate([t.keyword_ids for t in targets])
        logp = T.log_softmax(self.logits_at(hidden, b_idx, s_idx - 1), axis=1)
        score = T.tsum(logp[np.arange(len(kw)), kw])
        return score, feat_main, feat_ref
