"""Training, two-pass inference, evaluation and checkpoint selection.

Training runs ``warmup_epochs`` epochs of plain teacher-forced steps, then
switches to the two-step loop: step 1 computes a keyword-conditioned shared
saliency mask with the parameters held fixed, step 2 trains on the masked
pair.  After every evaluated epoch the validation split is answered with
two-pass inference and the checkpoint with the best combined score is kept.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .keyword import KeywordLexicon, extract_keyword, keyword_to_target
from .metrics import ScoreReport, combined, score_texts
from .model import DiffVQAModel, ModelConfig, Vocabulary, synthetic_vocabulary
from .nn import Adam
from .registration import RegLossWeights, reg_loss, warp_main
from .saliency import SaliencyMap, apply_masks, gradcam_batch, shared_mask
from .synthdata import Sample, load_split, parse_answer
from .tensor import NonFiniteError, Tensor
from .text import tokenize

log = logging.getLogger(__name__)


# -- configuration ------------------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 16
    warmup_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_small: float = 1e-4
    w_det: float = 1e-5
    w_trans: float = 1e-6
    data_root: str = "data"
    seed: int = 0
    ckpt_dir: str = "runs"
    eval_every: int = 1
    eval_split: str = "valid"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        positive = (self.batch_size, self.lr, self.beta1, self.beta2, self.eps, self.eval_every)
        if min(positive) <= 0:
            raise ConfigError("batch_size, lr, betas, eps and eval_every must be positive")
        if self.beta1 >= 1 or self.beta2 >= 1:
            raise ConfigError("betas must be < 1")
        RegLossWeights(self.w_small, self.w_det, self.w_trans)

    @property
    def reg_weights(self) -> RegLossWeights:
        return RegLossWeights(self.w_small, self.w_det, self.w_trans)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.toy(vocab_size, **self.model)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"}


def _coerce(raw: str, kind, key: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> TrainConfig:
    """``key = value`` lines, ``#`` comments; ``model.<field>`` sets model shapes."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"}
    values: dict = {}
    model: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in _MODEL_FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            model[name] = _coerce(raw, _MODEL_FIELDS[name].type, key)
        elif key in fields:
            values[key] = _coerce(raw, fields[key].type, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(**values, model=model)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, val in cfg.to_dict().items():
        if key == "model":
            continue
        lines.append(f"{key} = {val}")
    for key, val in cfg.model.items():
        if isinstance(val, (tuple, list)):
            val = " ".join(str(v) for v in val)
        lines.append(f"model.{key} = {val}")
    return "\n".join(lines) + "\n"


# -- batches --------------------------------------------------------------------------


@dataclass
class Batch:
    main: np.ndarray  # B×1×H×W
    ref: np.ndarray
    questions: list[list[int]]
    answers: list[list[int]]
    answer_texts: list[str]
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return self.main.shape[0]


def make_batch(samples: Sequence[Sample], vocab: Vocabulary) -> Batch:
    return Batch(
        main=np.stack([s.main for s in samples]),
        ref=np.stack([s.ref for s in samples]),
        questions=[vocab.encode(s.question) for s in samples],
        answers=[vocab.encode(s.answer) for s in samples],
        answer_texts=[s.answer for s in samples],
        samples=list(samples),
    )


def batches(samples: Sequence[Sample], size: int, order: np.ndarray | None = None):
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), size):
        yield [samples[i] for i in idx[start:start + size]]


@dataclass
class StepLosses:
    reg: float
    lm: float
    total: float
    masked: int = 0


def _ones_map(size: int) -> SaliencyMap:
    return SaliencyMap(np.ones((size, size)), "shared")


def keyword_masks(model, vocab: Vocabulary, lex: KeywordLexicon, cam_fn: Callable,
                  main_reg: np.ndarray, ref: np.ndarray, questions, answer_texts,
                  answer_ids) -> tuple[list[SaliencyMap], int]:
    """Shared saliency mask per sample, conditioned on the keyword of ``answer_texts``.

    Samples whose keyword is not found in their answer ids get an all-ones
    mask.  Returns the masks and the number of ``cam_fn`` calls made (0 or 1).
    """
    size = ref.shape[-1]
    targets = []
    for text, ids in zip(answer_texts, answer_ids):
        kw = extract_keyword(text, lex) if tokenize(text) else None
        targets.append(keyword_to_target(kw, vocab, ids) if kw else None)
    present = [i for i, t in enumerate(targets) if t is not None]
    masks = [_ones_map(size) for _ in targets]
    if len(present) < len(targets):
        log.info("%d sample(s) without a keyword target; left unmasked", len(targets) - len(present))
    if not present:
        return masks, 0
    m_main, m_ref = cam_fn(model, Tensor(main_reg[present]), Tensor(ref[present]),
                           [questions[i] for i in present], [targets[i] for i in present])
    for j, i in enumerate(present):
        masks[i] = shared_mask(SaliencyMap(m_main[j], "main"), SaliencyMap(m_ref[j], "ref"))
    return masks, 1


class Trainer:
    """Owns the model and optimizer; exposes one step of each training phase.

    ``cam_fn`` defaults to :func:`gradcam_batch` and can be swapped for a stub.
    """

    def __init__(self, model: DiffVQAModel, vocab: Vocabulary, cfg: TrainConfig,
                 lex: KeywordLexicon | None = None):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.lex = lex or KeywordLexicon.default()
        self.opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.cam_fn: Callable = gradcam_batch
        self.gradcam_calls = 0
        self.detach_lm = False

    # step 1 of the two-step loop; reads parameters, never writes them
    def saliency_masks(self, batch: Batch) -> list[SaliencyMap]:
        model = self.model
        main, ref = Tensor(batch.main), Tensor(batch.ref)
        with T.no_grad():
            main_reg = warp_main(main, model.predictor(main, ref)).data
        return self._masks_for(main_reg, batch.ref, batch.questions, batch.answer_texts,
                               batch.answers)

    def _masks_for(self, main_reg, ref, questions, answer_texts, answer_ids) -> list[SaliencyMap]:
        masks, called = keyword_masks(self.model, self.vocab, self.lex, self.cam_fn, main_reg, ref,
                                      questions, answer_texts, answer_ids)
        self.gradcam_calls += called
        return masks

    def _update(self, batch: Batch, masks: list[SaliencyMap] | None) -> StepLosses:
        model = self.model
        self.opt.zero_grad()
        model.zero_grad()
        main, ref = Tensor(batch.main), Tensor(batch.ref)
        theta = model.predictor(main, ref)
        main_reg = warp_main(main, theta)
        if masks is not None:
            # one mask object per sample flows to both images
            main_reg = apply_masks(main_reg, masks)
            ref = apply_masks(ref, masks)
        l_reg = reg_loss(theta, self.cfg.reg_weights)
        l_lm = model.lm_loss(main_reg, ref, batch.questions, batch.answers)
        lm_term = Tensor(l_lm.data) if self.detach_lm else l_lm
        total = l_reg + lm_term
        if not math.isfinite(total.item()):
            raise NonFiniteError(f"non-finite loss: reg={l_reg.item()} lm={l_lm.item()}")
        total.backward()
        self.opt.step()
        return StepLosses(l_reg.item(), l_lm.item(), total.item(),
                          0 if masks is None else len(masks))

    def train_step_warmup(self, batch: Batch) -> StepLosses:
        return self._update(batch, None)

    def train_step_masked(self, batch: Batch) -> StepLosses:
        return self._update(batch, self.saliency_masks(batch))


# -- inference ---------------------------------------------------------------------------


@dataclass
class InferenceResult:
    final: list[list[int]]
    preliminary: list[list[int]]
    keywords: list[str | None]
    masks: list[SaliencyMap | None]


class Predictor:
    """Single- and two-pass answering with a fixed model."""

    def __init__(self, model: DiffVQAModel, vocab: Vocabulary, lex: KeywordLexicon | None = None,
                 cam_fn: Callable = gradcam_batch):
        self.model = model
        self.vocab = vocab
        self.lex = lex or KeywordLexicon.default()
        self.cam_fn = cam_fn
        self.gradcam_calls = 0

    def _register(self, main: np.ndarray, ref: np.ndarray) -> np.ndarray:
        with T.no_grad():
            m = Tensor(main)
            return warp_main(m, self.model.predictor(m, Tensor(ref))).data

    def _generate(self, main_reg: np.ndarray, ref: np.ndarray, questions) -> list[list[int]]:
        return self.model.generate(Tensor(main_reg), Tensor(ref), questions)

    def single_pass(self, main: np.ndarray, ref: np.ndarray, questions) -> list[list[int]]:
        return self._generate(self._register(main, ref), ref, questions)

    def two_pass(self, main: np.ndarray, ref: np.ndarray, questions) -> InferenceResult:
        main_reg = self._register(main, ref)
        prelim = self._generate(main_reg, ref, questions)
        keywords: list[str | None] = []
        targets = []
        for ids in prelim:
            text = self.vocab.decode(ids)
            kw = extract_keyword(text, self.lex) if tokenize(text) else None
            keywords.append(kw)
            targets.append(keyword_to_target(kw, self.vocab, ids) if kw else None)
        present = [i for i, t in enumerate(targets) if t is not None]
        final = [list(p) for p in prelim]
        masks: list[SaliencyMap | None] = [None] * len(prelim)
        if len(present) < len(prelim):
            log.info("%d preliminary answer(s) without a keyword target; kept as final",
                     len(prelim) - len(present))
        if present:
            self.gradcam_calls += 1
            qs = [questions[i] for i in present]
            m_main, m_ref = self.cam_fn(self.model, Tensor(main_reg[present]), Tensor(ref[present]),
                                        qs, [targets[i] for i in present])
            sel = [shared_mask(SaliencyMap(m_main[j], "main"), SaliencyMap(m_ref[j], "ref"))
                   for j in range(len(present))]
            with T.no_grad():
                mm = apply_masks(Tensor(main_reg[present]), sel).data
                rm = apply_masks(Tensor(ref[present]), sel).data
            regen = self._generate(mm, rm, qs)
            for j, i in enumerate(present):
                final[i] = regen[j]
                masks[i] = sel[j]
        return InferenceResult(final, prelim, keywords, masks)

    def answer(self, main: np.ndarray, ref: np.ndarray, question: str,
               single_pass: bool = False) -> str:
        """Answer one pair of 1×H×W images."""
        q = [self.vocab.encode(question)]
        if single_pass:
            ids = self.single_pass(main[None], ref[None], q)[0]
        else:
            ids = self.two_pass(main[None], ref[None], q).final[0]
        return self.vocab.decode(ids)


def infer_single_pass(predictor: Predictor, main, ref, question: str) -> str:
    return predictor.answer(main, ref, question, single_pass=True)


def infer_two_pass(predictor: Predictor, main, ref, question: str) -> str:
    return predictor.answer(main, ref, question)


# -- evaluation ------------------------------------------------------------------------------


def keyword_hit(generated: str, keyword: str) -> bool:
    gen = tokenize(generated)
    kw = tokenize(keyword)
    return any(gen[i:i + len(kw)] == kw for i in range(len(gen) - len(kw) + 1))


@dataclass
class EvalResult:
    report: ScoreReport
    keyword_acc: float
    change_acc: float
    hypotheses: list[str]
    preliminary: list[str]
    single_keyword_acc: float
    single_change_acc: float

    def summary(self) -> dict:
        return {"scores": self.report.to_dict(), "keyword_acc": self.keyword_acc,
                "change_acc": self.change_acc, "single_keyword_acc": self.single_keyword_acc,
                "single_change_acc": self.single_change_acc}


def _accuracies(hyps: Sequence[str], samples: Sequence[Sample]) -> tuple[float, float]:
    kw = np.mean([keyword_hit(h, s.keyword) for h, s in zip(hyps, samples)])
    ch = np.mean([parse_answer(h)["change"] == s.change for h, s in zip(hyps, samples)])
    return float(kw), float(ch)


def evaluate(predictor: Predictor, samples: Sequence[Sample], batch_size: int = 32) -> EvalResult:
    """Two-pass answers scored against the references; pass 1 is scored too."""
    vocab = predictor.vocab
    finals, prelims = [], []
    for chunk in batches(samples, batch_size):
        b = make_batch(chunk, vocab)
        res = predictor.two_pass(b.main, b.ref, b.questions)
        finals.extend(vocab.decode(ids) for ids in res.final)
        prelims.extend(vocab.decode(ids) for ids in res.preliminary)
    refs = [s.answer for s in samples]
    report = score_texts(finals, refs)
    kw, ch = _accuracies(finals, samples)
    skw, sch = _accuracies(prelims, samples)
    return EvalResult(report, kw, ch, finals, prelims, skw, sch)


@dataclass
class Localization:
    mean_iou: float
    argmax_hit_rate: float
    count: int


def localization(model: DiffVQAModel, vocab: Vocabulary, samples: Sequence[Sample],
                 lex: KeywordLexicon | None = None, batch_size: int = 32,
                 threshold: float = 0.5) -> Localization:
    """Shared ground-truth-keyword Grad-CAM maps against the changed-lesion masks.

    Only samples with a visible change (non-empty mask) are scored.
    """
    lex = lex or KeywordLexicon.default()
    chosen = [s for s in samples if s.mask.any()]
    ious, hits = [], []
    for chunk in batches(chosen, batch_size):
        b = make_batch(chunk, vocab)
        main, ref = Tensor(b.main), Tensor(b.ref)
        with T.no_grad():
            main_reg = warp_main(main, model.predictor(main, ref)).data
        masks, _ = keyword_masks(model, vocab, lex, gradcam_batch, main_reg, b.ref, b.questions,
                                 b.answer_texts, b.answers)
        for s, m in zip(chunk, masks):
            pred = m.values >= threshold
            inter = np.logical_and(pred, s.mask).sum()
            union = np.logical_or(pred, s.mask).sum()
            ious.append(inter / union if union else 0.0)
            ys, xs = np.nonzero(s.mask)
            py, px = np.unravel_index(int(np.argmax(m.values)), m.values.shape)
            hits.append(ys.min() <= py <= ys.max() and xs.min() <= px <= xs.max())
    if not chosen:
        return Localization(0.0, 0.0, 0)
    return Localization(float(np.mean(ious)), float(np.mean(hits)), len(chosen))


# -- training driver --------------------------------------------------------------------------


def build_vocabulary(samples: Sequence[Sample]) -> Vocabulary:
    base = synthetic_vocabulary()
    extra = sorted({t for s in samples for t in tokenize(s.question + " " + s.answer)}
                   - set(base.tokens))
    return Vocabulary(base.tokens[5:] + extra)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DiffVQAModel, Vocabulary]:
    vocab = Vocabulary(ckpt.vocab[5:])
    model = DiffVQAModel(ckpt.model_config)
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the model")
    for name, p in named.items():
        if p.data.shape != ckpt.params[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = ckpt.params[name]
    return model, vocab


def make_checkpoint(trainer: Trainer, epoch: int, score: float) -> Checkpoint:
    params = {n: p.data.copy() for n, p in trainer.model.named_parameters()}
    optim = {k: np.array(v, copy=True) for k, v in trainer.opt.state_arrays().items()}
    return Checkpoint(trainer.model.cfg, list(trainer.vocab.tokens), params, optim, epoch,
                      float(score), {"train_config": trainer.cfg.to_dict()})


@dataclass
class TrainingRun:
    best: Checkpoint
    log: list[dict]
    trainer: Trainer
    log_path: Path
    best_path: Path


def run_training(cfg: TrainConfig, train: Sequence[Sample] | None = None,
                 valid: Sequence[Sample] | None = None,
                 trainer_hook: Callable[[Trainer], None] | None = None) -> TrainingRun:
    """Warm-up then masked epochs; keeps the checkpoint with the best combined score."""
    train = list(train) if train is not None else load_split(cfg.data_root, "train")
    valid = list(valid) if valid is not None else load_split(cfg.data_root, cfg.eval_split)
    if not train or not valid:
        raise ValueError("training and validation splits must be non-empty")
    vocab = build_vocabulary(train)
    model = DiffVQAModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    trainer = Trainer(model, vocab, cfg)
    if trainer_hook is not None:
        trainer_hook(trainer)
    out_dir = Path(cfg.ckpt_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.dvqk"
    log_path.write_text("", encoding="utf-8")
    records: list[dict] = []
    best: Checkpoint | None = None
    score = float("nan")
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        phase = "warmup" if epoch <= cfg.warmup_epochs else "masked"
        calls_before = trainer.gradcam_calls
        order = rng.permutation(len(train))
        losses = []
        for chunk in batches(train, cfg.batch_size, order):
            b = make_batch(chunk, vocab)
            step = trainer.train_step_warmup if phase == "warmup" else trainer.train_step_masked
            losses.append(step(b))
        rec = {
            "epoch": epoch, "phase": phase,
            "l_reg": float(np.mean([s.reg for s in losses])),
            "l_lm": float(np.mean([s.lm for s in losses])),
            "l_total": float(np.mean([s.total for s in losses])),
            "gradcam_calls": trainer.gradcam_calls - calls_before,
        }
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ev = evaluate(Predictor(model, vocab, trainer.lex), valid)
            rec["val"] = ev.report.to_dict()
            rec["val_keyword_acc"] = ev.keyword_acc
            rec["val_change_acc"] = ev.change_acc
            score = combined(ev.report.cider, ev.report.meteor)
            if best is None or score > best.score:
                best = make_checkpoint(trainer, epoch, score)
                save_checkpoint(best_path, best)
        records.append(rec)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("epoch %d %s l_lm=%.4f val=%s", epoch, phase, rec["l_lm"],
                 rec.get("val", {}).get("combined"))
    save_checkpoint(out_dir / "last.dvqk", make_checkpoint(trainer, cfg.epochs, score))
    return TrainingRun(best, records, trainer, log_path, best_path)


def load_predictor(path) -> Predictor:
    model, vocab = model_from_checkpoint(load_checkpoint(path))
    return Predictor(model, vocab)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]

