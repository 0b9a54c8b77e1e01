"""Training and inference pipeline: samples, sequences, steps, persistence.

The sequence contract: training consumes [audio, prompt, caption] embedding
rows with next-token targets defined only over caption positions (plus the
closing <eos>); inference consumes [audio, prompt] and decodes greedily,
either by full re-forwarding or by carrying per-block streaming state.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import audio as audiomod
from . import blocks, checkpoint, connector, optim, ssd, synth
from . import config as configmod
from . import tensor as tz
from .connector import SEG_CAPTION, SEG_PROMPT, EmbeddingSequence
from .tensor import ContractError, Tensor
from .vocab import Vocab


@dataclass
class Sample:
    """One training/eval item; audio is a wav path, feature path, or clip spec."""

    audio: dict
    prompt: str
    caption: str | None = None
    label: str | None = None

    def __post_init__(self):
        keys = set(self.audio) & {"wav", "features", "synthetic"}
        if len(keys) != 1:
            raise ContractError(
                f"sample audio must have exactly one of wav/features/synthetic, got {self.audio}"
            )


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class Captioner:
    """Audio encoder + connector + language model, wired per config."""

    def __init__(self, cfg: configmod.Config, vocab: Vocab):
        self.cfg = cfg
        self.vocab = vocab
        v = cfg.values
        rng = np.random.default_rng(v["train.seed"])

        self.lm_cfg = configmod.resolve_lm_config(cfg, len(vocab))
        self.lm = blocks.SsmLm(self.lm_cfg, rng)
        blocks.attach_lora(self.lm, v["model.lora_rank"], rng)

        self.enc_cfg = audiomod.EncoderConfig(
            d_enc=v["audio.d_enc"],
            channels=configmod.parse_channels(v["audio.channels"]),
            patches=configmod.parse_patches(v["audio.patches"]),
            mel_frames=v["audio.mel_frames"],
        )
        self.encoder = audiomod.CnnEncoder(self.enc_cfg, rng)

        self.conn_cfg = connector.ConnectorConfig(
            variant=v["connector.variant"],
            d_enc=self.enc_cfg.d_enc,
            grid_t=self.enc_cfg.grid_t,
            grid_f=self.enc_cfg.grid_f,
            d_model=self.lm_cfg.d_model,
            hidden_mult=v["connector.hidden_mult"],
            sep_position=v["connector.sep_position"],
        )
        self.mlp = connector.ConnectorMlp(self.conn_cfg, rng)
        self.sep_embedding = Tensor(
            rng.standard_normal(self.lm_cfg.d_model) / np.sqrt(self.lm_cfg.d_model)
        )
        self.scan_mode = v["model.scan_mode"]
        self.chunk_len = v["model.chunk_len"]
        self._grid_cache: dict[str, audiomod.AudioTokenGrid] = {}
        self._mel_cache: dict[str, audiomod.MelSpec] = {}

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"sep_embedding": self.sep_embedding}
        for k, t in self.lm.parameters().items():
            out[f"lm.{k}"] = t
        for k, t in self.encoder.parameters().items():
            out[f"encoder.{k}"] = t
        for k, t in self.mlp.parameters().items():
            out[f"connector.{k}"] = t
        return out

    def trainable_parameters(self, encoder_trainable: bool | None = None) -> dict[str, Tensor]:
        """Exactly: LoRA adapters, connector, separator embedding, and the
        encoder when trainable. Everything else is frozen in place."""
        if encoder_trainable is None:
            encoder_trainable = self.cfg["train.encoder_trainable"]
        chosen = {"sep_embedding": self.sep_embedding}
        for k, t in blocks.lora_parameters(self.lm).items():
            chosen[f"lm.{k}"] = t
        for k, t in self.mlp.parameters().items():
            chosen[f"connector.{k}"] = t
        if encoder_trainable:
            for k, t in self.encoder.parameters().items():
                chosen[f"encoder.{k}"] = t
        for name, t in self.named_parameters().items():
            t.requires_grad = name in chosen
        return chosen

    # -- audio path -----------------------------------------------------------

    def audio_grid(self, sample: Sample, frozen: bool | None = None) -> audiomod.AudioTokenGrid:
        if "features" in sample.audio:
            return audiomod.load_features(sample.audio["features"])
        if frozen is None:
            frozen = not self.cfg["train.encoder_trainable"]
        key = repr(sorted(sample.audio.items()))
        if frozen and key in self._grid_cache:
            return self._grid_cache[key]
        # the mel image depends only on the clip, never on weights
        mel = self._mel_cache.get(key)
        if mel is None:
            if "wav" in sample.audio:
                wave = audiomod.load_wav(sample.audio["wav"])
            else:
                wave = Tensor(synth.render(sample.audio["synthetic"]))
            mel = audiomod.melspectrogram(wave).pad_to(self.enc_cfg.mel_frames)
            self._mel_cache[key] = mel
        grid = audiomod.encode(mel, self.encoder, frozen=frozen)
        if frozen:
            self._grid_cache[key] = grid
        return grid

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        """Token table rows, with the reserved "&&" row replaced by the
        trainable separator embedding."""
        ids = np.asarray(ids, dtype=np.int64)
        base = tz.embedding(self.lm.embedding, ids)
        sep_mask = (ids == self.vocab.sep_id).astype(base.dtype)[:, None]
        if sep_mask.any():
            sep_row = tz.reshape(self.sep_embedding, (1, self.lm_cfg.d_model))
            base = tz.add(tz.mul(base, 1.0 - sep_mask), tz.mul(sep_row, Tensor(sep_mask)))
        return base

    # -- sequence building ------------------------------------------------------

    def build_sequence(self, sample: Sample, mode: str = "train"):
        """-> (EmbeddingSequence, targets [L] int64, loss mask [L] float).

        Train layout: [E_audio, E_prompt, E_caption]; position i is trained
        to predict position i+1's token over the caption span plus <eos>,
        so exactly len(caption)+1 positions carry loss. Inference layout
        drops the caption and returns empty targets.
        """
        aud = connector.connect(self.audio_grid(sample), self.conn_cfg, self.mlp,
                                self.sep_embedding)
        prompt_ids = self.vocab.encode(sample.prompt)
        parts = [aud.vectors, self.embed_tokens(prompt_ids)]
        segments = list(aud.segments) + [SEG_PROMPT] * len(prompt_ids)

        if mode == "infer":
            vectors = tz.concat(parts, axis=0)
            length = len(segments)
            return (
                EmbeddingSequence(vectors, segments),
                np.zeros(length, dtype=np.int64),
                np.zeros(length, dtype=np.float64),
            )
        if mode != "train":
            raise ContractError(f"unknown sequence mode {mode!r}")
        if not sample.caption:
            raise ContractError("training sample has an empty caption")

        cap_ids = self.vocab.encode(sample.caption)
        parts.append(self.embed_tokens(cap_ids))
        segments += [SEG_CAPTION] * len(cap_ids)
        vectors = tz.concat(parts, axis=0)

        length = len(segments)
        targets = np.zeros(length, dtype=np.int64)
        mask = np.zeros(length, dtype=np.float64)
        first = length - len(cap_ids) - 1  # last prompt position predicts word 1
        chain = cap_ids + [self.vocab.eos_id]
        for i, tok in enumerate(chain):
            targets[first + i] = tok
            mask[first + i] = 1.0
        return EmbeddingSequence(vectors, segments), targets, mask

    # -- forward ------------------------------------------------------------

    def batch_forward(self, samples: list[Sample], mode: str = "train"):
        """Pad sequences to a common length, stack, and run the LM once.

        -> (logits [B, L, V], targets [B, L], mask [B, L])
        """
        built = [self.build_sequence(s, mode) for s in samples]
        length = max(len(seq.segments) for seq, _, _ in built)
        rows, targets, masks = [], [], []
        for seq, tgt, msk in built:
            pad = length - len(seq.segments)
            vec = seq.vectors
            if pad:
                vec = tz.concat([vec, tz.zeros((pad, self.lm_cfg.d_model), dtype=vec.dtype)],
                                axis=0)
            rows.append(tz.reshape(vec, (1, length, self.lm_cfg.d_model)))
            targets.append(np.pad(tgt, (0, pad)))
            masks.append(np.pad(msk, (0, pad)))
        embs = tz.concat(rows, axis=0)
        logits = self.lm.forward(embs, mode=self.scan_mode, chunk_len=self.chunk_len)
        return logits, np.stack(targets), np.stack(masks)

    # -- persistence ------------------------------------------------------------

    def save(self, path: str, trainable_only: bool = False) -> None:
        params = self.trainable_parameters() if trainable_only else self.named_parameters()
        tensors = {k: t.data for k, t in params.items()}
        meta = {f"vocab.{i}": w for i, w in enumerate(self.vocab.words)}
        meta["kind"] = "adapters" if trainable_only else "full"
        checkpoint.save(path, tensors, config_text=configmod.dump(self.cfg), meta=meta)

    def load_tensors(self, path: str, subset_ok: bool = False) -> None:
        tensors, _, _ = checkpoint.load(path)
        params = self.named_parameters()
        missing = set(params) - set(tensors)
        if missing and not subset_ok:
            raise checkpoint.CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
        for name, arr in tensors.items():
            if name not in params:
                raise checkpoint.CheckpointError(f"checkpoint has unknown tensor {name!r}")
            if params[name].shape != arr.shape:
                raise checkpoint.CheckpointError(
                    f"tensor {name}: shape {arr.shape} does not match model {params[name].shape}"
                )
            params[name].data = arr.astype(params[name].dtype)
        self._grid_cache.clear()


def load_captioner(path: str) -> Captioner:
    """Rebuild a Captioner from a full checkpoint (config + vocab + tensors)."""
    _, config_text, meta = checkpoint.load(path)
    cfg = configmod.parse_text(config_text)
    words = [meta[f"vocab.{i}"] for i in range(sum(1 for k in meta if k.startswith("vocab.")))]
    model = Captioner(cfg, Vocab(words))
    model.load_tensors(path, subset_ok=meta.get("kind") == "adapters")
    return model


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    captioner: Captioner
    optimizer: optim.AdamW
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    dump_dir: str | None = None


def make_train_state(captioner: Captioner, lr: float | None = None,
                     encoder_trainable: bool | None = None,
                     dump_dir: str | None = None) -> TrainState:
    v = captioner.cfg.values
    params = captioner.trainable_parameters(encoder_trainable)
    opt = optim.AdamW(
        params,
        lr=v["train.lr_stage1"] if lr is None else lr,
        betas=(v["train.beta1"], v["train.beta2"]),
        weight_decay=v["train.weight_decay"],
    )
    return TrainState(captioner, opt, dump_dir=dump_dir)


def train_step(state: TrainState, batch: list[Sample]) -> float:
    """One optimizer step of mean masked cross-entropy over the batch."""
    cap = state.captioner
    state.optimizer.zero_grad()
    logits, targets, mask = cap.batch_forward(batch, mode="train")
    loss = tz.cross_entropy(logits, targets, mask)
    value = loss.item()
    if not np.isfinite(value):
        path = _write_divergence_dump(state, value)
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step}", path)
    loss.backward()
    optim.clip_grad_norm(state.optimizer.params, cap.cfg["train.clip_norm"])
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(value)
    return value


def _write_divergence_dump(state: TrainState, value: float) -> str | None:
    if state.dump_dir is None:
        return None
    os.makedirs(state.dump_dir, exist_ok=True)
    path = os.path.join(state.dump_dir, f"diverged_step{state.step}.txt")
    with open(path, "w") as fh:
        fh.write(f"loss={value} step={state.step}\n")
        fh.write("recent_losses=" + ",".join(f"{x:.6g}" for x in state.loss_history[-20:]) + "\n")
        for name, t in sorted(state.optimizer.params.items()):
            fh.write(f"param {name} |w|max={np.abs(t.data).max():.6g}")
            if t.grad is not None:
                fh.write(f" |g|max={np.abs(t.grad).max():.6g}")
            fh.write("\n")
    return path


# -- greedy decoding -------------------------------------------------------------


def generate_greedy(captioner: Captioner, sample: Sample, max_len: int = 24,
                    streaming: bool = True) -> str:
    """Argmax decoding until <eos> or max_len tokens.

    Streaming mode carries per-block scan/conv state so each step costs
    O(1) in sequence length; the non-streaming path re-forwards the whole
    growing sequence every step. Both produce identical tokens.
    """
    if max_len <= 0:
        return ""
    with tz.no_grad():
        seq, _, _ = captioner.build_sequence(sample, mode="infer")
        prefix = tz.reshape(seq.vectors, (1,) + seq.vectors.shape)
        if streaming:
            ids = _decode_streaming(captioner, prefix, max_len)
        else:
            ids = _decode_full(captioner, prefix, max_len)
    words = [captioner.vocab.words[i] for i in ids if i != captioner.vocab.eos_id]
    return " ".join(words)


def _decode_streaming(cap: Captioner, prefix: Tensor, max_len: int) -> list[int]:
    # convolutional mode cannot carry state, so prefill falls back to chunked
    prefill_mode = "chunked" if cap.scan_mode == "convolutional" else cap.scan_mode
    logits, states = cap.lm.forward(prefix, mode=prefill_mode, chunk_len=cap.chunk_len,
                                    return_states=True)
    ids: list[int] = []
    nxt = int(np.argmax(logits.data[0, -1]))
    while True:
        ids.append(nxt)
        if nxt == cap.vocab.eos_id or len(ids) >= max_len:
            return ids
        emb = tz.reshape(cap.embed_tokens(np.array([nxt])), (1, 1, cap.lm_cfg.d_model))
        logits, states = cap.lm.forward(emb, mode="recurrent", states=states,
                                        return_states=True)
        nxt = int(np.argmax(logits.data[0, -1]))


def _decode_full(cap: Captioner, prefix: Tensor, max_len: int) -> list[int]:
    ids: list[int] = []
    current = prefix
    while True:
        logits = cap.lm.forward(current, mode=cap.scan_mode, chunk_len=cap.chunk_len)
        nxt = int(np.argmax(logits.data[0, -1]))
        ids.append(nxt)
        if nxt == cap.vocab.eos_id or len(ids) >= max_len:
            return ids
        emb = tz.reshape(cap.embed_tokens(np.array([nxt])), (1, 1, cap.lm_cfg.d_model))
        current = tz.concat([current, emb], axis=1)


# -- evaluation ---------------------------------------------------------------


def token_f1(generated: str, reference: str) -> float:
    """Bag-of-words F1 between two captions."""
    gen = generated.split()
    ref = reference.split()
    if not gen or not ref:
        return 0.0
    common = 0
    pool = list(ref)
    for w in gen:
        if w in pool:
            pool.remove(w)
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(gen)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def evaluate(captioner: Captioner, samples: list[Sample], max_len: int | None = None):
    """-> (teacher-forced token accuracy, mean caption F1, exact-match rate)."""
    if max_len is None:
        max_len = captioner.cfg["train.max_caption_len"]
    with tz.no_grad():
        logits, targets, mask = captioner.batch_forward(samples, mode="train")
    pred = logits.data.argmax(axis=-1)
    hits = float(((pred == targets) * (mask > 0)).sum())
    token_acc = hits / float((mask > 0).sum())
    f1s, exact = [], []
    for s in samples:
        gen = generate_greedy(captioner, s, max_len=max_len)
        f1s.append(token_f1(gen, s.caption or ""))
        exact.append(1.0 if gen == s.caption else 0.0)
    return token_acc, float(np.mean(f1s)), float(np.mean(exact))


# -- experiment driver ------------------------------------------------------------

METRICS_HEADER = ("epoch", "stage", "loss", "token_acc", "caption_f1", "seed")


def corpus_samples(cfg: configmod.Config) -> tuple[list[Sample], list[Sample]]:
    v = cfg.values
    n_train, n_eval = v["data.n_train"], v["data.n_eval"]
    if v["data.source"] == "synthetic":
        records = synth.make_corpus(n_train + n_eval, seed=v["train.seed"])
        samples = [
            Sample(audio={"synthetic": r["spec"]}, prompt=v["data.prompt"],
                   caption=r["caption"], label=r["label"])
            for r in records
        ]
    else:
        records = synth.read_manifest(v["data.manifest"])
        if len(records) < n_train + n_eval:
            raise ContractError(
                f"manifest has {len(records)} records, need {n_train + n_eval}"
            )
        samples = [
            Sample(audio={"wav": r["wav"]}, prompt=v["data.prompt"],
                   caption=r["caption"], label=r.get("label"))
            for r in records[: n_train + n_eval]
        ]
    return samples[:n_train], samples[n_train:]


def build_vocab_for(cfg: configmod.Config, train: list[Sample], eval_: list[Sample]) -> Vocab:
    texts = [cfg["data.prompt"], cfg["data.classify_prompt"]]
    for s in train + eval_:
        if s.caption:
            texts.append(s.caption)
        if s.label:
            texts.append(s.label)
    return Vocab.build(texts, max_size=cfg["model.max_vocab"])


def run_experiment(cfg: configmod.Config, out_dir: str, tag: str = "") -> list[dict]:
    """Full train/eval schedule; emits metrics.csv and final checkpoint.

    Stages: optional classification-prompt warmup, then two caption stages
    with the second learning rate a tenth of the first by default.
    Deterministic under a fixed seed in fp64 precision.
    """
    os.makedirs(out_dir, exist_ok=True)
    v = cfg.values
    tz.set_default_dtype(np.float64 if v["train.precision"] == "fp64" else np.float32)
    try:
        train, eval_ = corpus_samples(cfg)
        vocab = build_vocab_for(cfg, train, eval_)
        cap = Captioner(cfg, vocab)
        state = make_train_state(cap, dump_dir=out_dir)

        stages = []
        if v["train.warmup_epochs"] > 0:
            warm = [Sample(audio=s.audio, prompt=v["data.classify_prompt"],
                           caption=s.label, label=s.label) for s in train]
            stages.append(("warmup", v["train.warmup_epochs"], v["train.lr_stage1"], warm))
        stages.append(("stage1", v["train.epochs_stage1"], v["train.lr_stage1"], train))
        stages.append(("stage2", v["train.epochs_stage2"], v["train.lr_stage2"], train))

        rng = np.random.default_rng(v["train.seed"] + 1)
        rows = []
        epoch = 0
        for stage_name, epochs, lr, pool in stages:
            state.optimizer.lr = lr
            for _ in range(epochs):
                losses = []
                for _ in range(v["train.steps_per_epoch"]):
                    idx = rng.choice(len(pool), size=min(v["train.batch_size"], len(pool)),
                                     replace=False)
                    losses.append(train_step(state, [pool[i] for i in sorted(idx)]))
                token_acc, f1, _ = evaluate(cap, eval_ if eval_ else pool)
                rows.append({
                    "epoch": epoch,
                    "stage": stage_name if not tag else f"{stage_name}:{tag}",
                    "loss": float(np.mean(losses)),
                    "token_acc": token_acc,
                    "caption_f1": f1,
                    "seed": v["train.seed"],
                })
                epoch += 1

        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        cap.save(os.path.join(out_dir, "final.ckpt"))
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(configmod.dump(cfg))
        return rows
    finally:
        tz.set_default_dtype(np.float64)


def write_metrics(path: str, rows: list[dict], append: bool = False) -> None:
    exists = os.path.exists(path) and append
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        if not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in METRICS_HEADER})


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return value
