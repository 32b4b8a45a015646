"""Run configuration: a flat key = value file with sections, fully archivable.

Re-running an archived config with the same seed reproduces every output file
byte-identically (trace timings excepted).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields
from fractions import Fraction

from .codebook import Codebook, build_codebook
from .errors import ConfigError, PlanError
from .generators import (
    MarkovGenerator,
    PromptEmbedding,
    SamplingParams,
    TinyCausalModel,
    read_pmdl,
)
from .scheduler import ExpansionPlan, iterations_for_extent, step_from_stride

_SECTIONS = {
    "run": ("mode", "prompt", "layout_path", "guide_path", "generator", "seed",
            "out_dir", "parallel_rows"),
    "plan": ("side", "stride", "stride_vertical", "n", "width_px", "height_px"),
    "codebook": ("codebook_size", "embedding_dim", "patch_size", "codebook_seed"),
    "sampling": ("temperature", "top_k"),
    "generator": ("markov_order", "tiny_window", "tiny_dim", "tiny_seed",
                  "tiny_checkpoint"),
    "metrics": ("seam_half_width", "crop_side"),
}


@dataclass
class RunConfig:
    # run
    mode: str = "horizontal"
    prompt: str = "seascape"
    layout_path: str = ""
    guide_path: str = ""
    generator: str = "markov"
    seed: int = 0
    out_dir: str = "out"
    parallel_rows: bool = False
    # plan
    side: int = 32
    stride: str = "3/4"
    stride_vertical: str = ""  # defaults to stride
    n: int = 0  # 0 = derive the iteration count from width/height
    width_px: int = 5120
    height_px: int = 512
    # codebook
    codebook_size: int = 256
    embedding_dim: int = 8
    patch_size: int = 16
    codebook_seed: int = 0
    # sampling
    temperature: float = 1.0
    top_k: int = 0
    # generator internals
    markov_order: int = 1
    tiny_window: int = 1024
    tiny_dim: int = 8
    tiny_seed: int = 0
    tiny_checkpoint: str = ""
    # metrics
    seam_half_width: int = 8
    crop_side: int = 0  # 0 = block side in pixels

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in _SECTIONS.items():
            parser[section] = {key: str(getattr(self, key)) for key in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kind = types[key]
                try:
                    if kind == "bool":
                        value = raw.strip().lower() in ("1", "true", "yes", "on")
                    elif kind == "int":
                        value = int(raw)
                    elif kind == "float":
                        value = float(raw)
                    else:
                        value = raw
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
                setattr(cfg, key, value)
        return cfg

    def validate(self) -> None:
        if self.mode not in ("vertical", "horizontal", "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.generator not in ("markov", "tiny"):
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.side < 2:
            raise ConfigError(f"block side must be >= 2, got {self.side}")
        if self.patch_size < 1:
            raise ConfigError(f"patch size must be >= 1, got {self.patch_size}")

    def stride_fraction(self, vertical: bool = False) -> Fraction:
        raw = self.stride_vertical if (vertical and self.stride_vertical) else self.stride
        try:
            value = Fraction(raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad stride {raw!r}") from exc
        if not 0 < value <= 1:
            raise ConfigError(f"stride must be in (0, 1], got {value}")
        return value

    def sampling_params(self) -> SamplingParams:
        return SamplingParams(temperature=self.temperature, top_k=self.top_k, seed=self.seed)

    def build_codebook(self) -> Codebook:
        return build_codebook(
            self.codebook_size, self.embedding_dim, self.codebook_seed, self.patch_size
        )

    def build_plan(self) -> ExpansionPlan:
        self.validate()
        s, q = self.side, self.patch_size
        r = c = None
        n_h = None
        if self.mode in ("horizontal", "both"):
            c = step_from_stride(s, self.stride_fraction())
        if self.mode in ("vertical", "both"):
            r = step_from_stride(s, self.stride_fraction(vertical=True))
            if r >= s:
                raise PlanError(f"vertical stride 1 is not expandable (r must be < {s})")

        if self.n:
            n = self.n
            if self.mode == "both":
                n_h = self.n
        elif self.mode == "horizontal":
            n = self._extent_iterations(self.width_px, s, c, q, "width")
        elif self.mode == "vertical":
            n = self._extent_iterations(self.height_px, s, r, q, "height")
        else:
            n = self._extent_iterations(self.height_px, s, r, q, "height")
            n_h = self._extent_iterations(self.width_px, s, c, q, "width")
        return ExpansionPlan(self.mode, s, n, rows_per_iter=r, cols_per_iter=c,
                             n_horizontal=n_h)

    @staticmethod
    def _extent_iterations(px: int, side: int, step: int, q: int, label: str) -> int:
        if px % q:
            raise PlanError(f"{label} {px}px is not divisible by patch size {q}")
        return iterations_for_extent(side, step, px // q)

    def build_generator(self, prompt: PromptEmbedding, codebook: Codebook):
        if self.generator == "markov":
            return MarkovGenerator(codebook.size, self.markov_order, prompt)
        if self.tiny_checkpoint:
            model = read_pmdl(self.tiny_checkpoint)
            if not isinstance(model, TinyCausalModel):
                raise ConfigError(f"{self.tiny_checkpoint} is not a causal-model checkpoint")
            if model.codebook_size != codebook.size:
                raise ConfigError(
                    f"checkpoint codebook size {model.codebook_size} does not match "
                    f"the configured {codebook.size}"
                )
            return model
        return TinyCausalModel(
            codebook.size, self.tiny_window, self.tiny_dim, seed=self.tiny_seed
        )
