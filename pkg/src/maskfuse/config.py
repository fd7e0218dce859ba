"""Run configuration: a flat key=value document with typed, registered keys.

Unknown keys are rejected; every run writes the fully resolved document
(defaults expanded) next to its outputs so any result can be reproduced from
the directory alone.
"""

from dataclasses import dataclass

from maskfuse.data import ToyWorldConfig
from maskfuse.sampler import SamplerConfig
from maskfuse.schedule import ScheduleKind
from maskfuse.transformer import ModelSpec
from maskfuse.vocab import ConfigError, JointVocab, ModalityLayout

# key -> (type, default, help)
REGISTRY: dict[str, tuple[str, object, str]] = {
    "seed": ("int", 0, "root seed; all randomness flows from named substreams of it"),
    "run.output_dir": ("str", "runs/latest", "where outputs and the resolved config land"),
    # toy data
    "data.grid_rows": ("int", 2, "image grid rows"),
    "data.grid_cols": ("int", 2, "image grid cols"),
    "data.palette_size": ("int", 2, "number of cell colors (= image vocab size)"),
    "data.caption_templates": ("int", 1, "caption orderings; selection is grid-determined"),
    "data.text_len": ("int", 0, "caption length; 0 derives 2*palette_size"),
    "data.image_first": ("bool", True, "image block before text block"),
    "data.enumerable": ("bool", True, "enumerate the full support with exact probabilities"),
    "data.n_samples": ("int", 0, "sample count for the non-enumerable large-toy mode"),
    "data.flip_modality_prob": ("float", 0.0, "per-sample modality-order flip (AR retrieval uses 0.2)"),
    # vocab (0 = derive from data)
    "vocab.text_size": ("int", 0, "explicit text vocab size; 0 derives from data"),
    "vocab.image_size": ("int", 0, "explicit image vocab size; 0 derives from data"),
    # schedule
    "schedule.kind": ("str", "linear", "linear | cosine | discrete:T"),
    "schedule.weight_clamp": ("float", 5.0, "loss-weight cap"),
    # forward process
    "forward.p_uncond": ("float", 0.1, "modality-dropout probability for guidance training"),
    "forward.k_ratio": ("float", 10.0, "text-to-image inference speed ratio"),
    "forward.n_min": ("int", 16, "min inference step count assumed during training"),
    "forward.n_max": ("int", 128, "max inference step count assumed during training"),
    # model
    "model.n_layers": ("int", 2, ""),
    "model.n_heads": ("int", 4, ""),
    "model.d_model": ("int", 64, ""),
    "model.ffn_multiplier": ("int", 4, "FFN hidden = multiplier * d_model"),
    "model.attention": ("str", "bidirectional", "bidirectional | causal"),
    "model.qk_norm": ("bool", True, ""),
    "model.sandwich_norm": ("bool", True, "normalize before and after each FFN"),
    "model.zero_init_output": ("bool", True, ""),
    "model.suppress_invalid": ("bool", True, "-inf on cross-modality logits"),
    "model.use_rope": ("bool", True, ""),
    "model.use_modality_embed": ("bool", True, ""),
    # training
    "train.steps": ("int", 2000, ""),
    "train.batch_size": ("int", 128, ""),
    "train.lr": ("float", 3e-4, "max learning rate (linear warmup, cosine decay to 0)"),
    "train.weight_decay": ("float", 0.05, ""),
    "train.warmup_steps": ("int", 100, ""),
    "train.weighting": ("str", "clamped", "clamped | raw | none (ablations)"),
    "train.log_every": ("int", 100, ""),
    "finetune.from_ar_checkpoint": ("str", "", "AR checkpoint to fine-tune with shifted diffusion targets"),
    # sampler
    "sampler.steps": ("int", 16, ""),
    "sampler.strategy": ("str", "maskgit", "maskgit | ddpm | one_per_step"),
    "sampler.top_k": ("int", 0, "0 disables"),
    "sampler.top_p": ("float", 0.0, "0 disables"),
    "sampler.temperature": ("float", 1.0, ""),
    "sampler.anneal": ("str", "none", "none | linear"),
    "sampler.cfg_weight": ("float", 1.5, "guidance weight"),
    "sampler.cfg_window": ("str", "", "inclusive step range lo:hi; empty = all steps"),
    "sampler.cfg_paper_sign": ("bool", False, "reproduce the printed '+' blend"),
    "sampler.cache_period": ("int", 0, "refresh image KV every K steps; 0 disables"),
    "sampler.confidence": ("str", "post_filter", "post_filter | pre_filter"),
    # evaluation
    "eval.n_mc": ("int", 64, "MC draws per likelihood bound"),
    "eval.n_samples": ("int", 512, "generations to score"),
    "eval.assert_max_elbo_gap": ("float", 0.15, "--assert: max ELBO minus exact NLL, nats/token"),
    # retrieval
    "retrieve.mode": ("str", "joint", "joint | image_given_text | text_given_image"),
    "retrieve.n_candidates": ("int", 16, ""),
    "retrieve.n_tasks": ("int", 20, ""),
    "retrieve.n_mc_values": ("str", "64", "comma list for the sweep grid"),
    "retrieve.cfg_weights": ("str", "0.0", "comma list for the sweep grid"),
    "retrieve.assert_min_accuracy": ("float", 0.9, "--assert threshold"),
    # editing
    "edit.n": ("int", 4, "best-of-n candidates"),
    "edit.noise_level": ("float", 0.5, ""),
    "edit.clamp_text": ("bool", False, "only the image region may change"),
    # scaling lab
    "scale.budgets": ("str", "", "comma list of FLOP budgets; empty uses planted defaults"),
    "scale.grid": ("str", "", "semicolon list layers:heads:dmodel; empty uses a default grid"),
    "scale.planted": ("bool", True, "sweep a planted surface instead of real training"),
    "scale.batch_size": ("int", 32, "batch size for real toy sweeps"),
    "scale.assert_max_exponent_err": ("float", 0.05, "--assert threshold on planted recovery"),
}


def _parse_value(key: str, raw: str):
    kind, _, _ = REGISTRY[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from exc


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: default for k, (_, default, _) in REGISTRY.items()})

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        cfg = cls.defaults()
        if path is not None:
            with open(path) as f:
                for line_no, line in enumerate(f, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    key, sep, value = line.partition("=")
                    if not sep:
                        raise ConfigError(f"{path}:{line_no}: expected key = value")
                    cfg.set(key.strip(), value)
        for key, value in overrides or []:
            cfg.set(key, value)
        return cfg

    def set(self, key: str, raw_value: str) -> None:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, str(raw_value))

    def __getitem__(self, key: str):
        return self.values[key]

    # -- resolution helpers -------------------------------------------------
    def toy_config(self) -> ToyWorldConfig:
        return ToyWorldConfig(
            rows=self["data.grid_rows"],
            cols=self["data.grid_cols"],
            palette_size=self["data.palette_size"],
            caption_templates=self["data.caption_templates"],
            text_len=self["data.text_len"],
            image_first=self["data.image_first"],
            seed=self["seed"],
        )

    def vocab(self) -> JointVocab:
        if self["vocab.text_size"] > 0 or self["vocab.image_size"] > 0:
            if self["vocab.text_size"] < 1 or self["vocab.image_size"] < 1:
                raise ConfigError("explicit vocab needs both text_size and image_size >= 1")
            return JointVocab(self["vocab.text_size"], self["vocab.image_size"])
        return self.toy_config().vocab()

    def layout(self) -> ModalityLayout:
        return self.toy_config().layout()

    def schedule_kind(self) -> ScheduleKind:
        return ScheduleKind.parse(self["schedule.kind"])

    def model_spec(self) -> ModelSpec:
        vocab = self.vocab()
        layout = self.layout()
        return ModelSpec(
            n_layers=self["model.n_layers"],
            n_heads=self["model.n_heads"],
            d_model=self["model.d_model"],
            text_size=vocab.text_size,
            image_size=vocab.image_size,
            image_rows=layout.image_rows,
            image_cols=layout.image_cols,
            text_len=layout.text_len,
            image_first=layout.image_first,
            ffn_multiplier=self["model.ffn_multiplier"],
            attention=self["model.attention"],
            qk_norm=self["model.qk_norm"],
            sandwich_norm=self["model.sandwich_norm"],
            zero_init_output=self["model.zero_init_output"],
            suppress_invalid=self["model.suppress_invalid"],
            use_rope=self["model.use_rope"],
            use_modality_embed=self["model.use_modality_embed"],
        )

    def sampler_config(self) -> SamplerConfig:
        window = None
        if self["sampler.cfg_window"]:
            lo, _, hi = self["sampler.cfg_window"].partition(":")
            window = (int(lo), int(hi))
        return SamplerConfig(
            steps=self["sampler.steps"],
            strategy=self["sampler.strategy"],
            schedule=self.schedule_kind(),
            top_k=self["sampler.top_k"] or None,
            top_p=self["sampler.top_p"] or None,
            temperature=self["sampler.temperature"],
            anneal=self["sampler.anneal"],
            cfg_weight=self["sampler.cfg_weight"],
            cfg_step_window=window,
            cfg_paper_sign=self["sampler.cfg_paper_sign"],
            cache_period=self["sampler.cache_period"] or None,
            confidence=self["sampler.confidence"],
            seed=self["seed"],
        )

    def resolved_text(self) -> str:
        """The full document with derived vocab sizes written back in."""
        values = dict(self.values)
        vocab = self.vocab()
        values["vocab.text_size"] = vocab.text_size
        values["vocab.image_size"] = vocab.image_size
        lines = [f"{k} = {values[k]}" for k in sorted(values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir) -> str:
        import os

        os.makedirs(out_dir, exist_ok=True)
        text = self.resolved_text()
        with open(os.path.join(out_dir, "config.resolved"), "w") as f:
            f.write(text)
        return text
