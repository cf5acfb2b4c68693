"""Run configuration and the flat ``key = value`` config file format.

Every :class:`RunConfig` field is a key of its own; synthetic-data fields
take a ``synth_`` prefix (``synth_n_users = 200``).  ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .synthetic import SyntheticConfig


@dataclass
class RunConfig:
    # data: a directory of TSV files, or a synthetic dataset when empty
    data_dir: str = ""
    synth_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    l_max: int = 50
    window: int = 10
    # model
    d: int = 32
    att_hidden: int = 16
    head_hidden: tuple = (64, 32)
    sas_blocks: int = 1
    sas_heads: int = 1
    use_query_feature: bool = True
    # auxiliary losses
    n_pos: int = 4
    n_neg: int = 4
    n_ctr_pos: int = 8
    n_ctr_neg: int = 64
    beta_ctr: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    # diffusion augmentation
    use_diffusion: bool = True
    diffusion_steps: int = 50
    diffusion_beta_min: float = 1e-4
    diffusion_beta_max: float = 0.02
    diffusion_r_p: float = 0.5
    diffusion_r_n: float = -0.5
    diffusion_mask_rate: float = 0.3
    diffusion_top_k: int = 4
    diffusion_train_steps: int = 1000
    diffusion_batch_size: int = 32
    diffusion_lr: float = 1e-3
    diffusion_start_step: int = -1  # -1: half of diffusion_steps
    diffusion_sparse_max: int = 1
    # optimisation
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    patience: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("lambda2 and lambda3 must be non-negative")
        for name in ("d", "n_pos", "n_neg", "n_ctr_pos", "n_ctr_neg", "batch_size", "epochs", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.beta_ctr <= 0:
            raise ValueError("beta_ctr must be positive")
        if self.d % self.sas_heads:
            raise ValueError("d must be divisible by sas_heads")

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "synthetic":
                for k, v in value.to_dict().items():
                    out[f"synth_{k}"] = _format(v)
            else:
                out[f.name] = _format(value)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    @classmethod
    def from_flat(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls) if f.name != "synthetic"}
        direct, synth = {}, {}
        for key, raw in values.items():
            if key.startswith("synth_") and key != "synth_seed":
                synth[key[len("synth_") :]] = raw
            elif key in types:
                direct[key] = _parse(raw, types[key], key)
            else:
                raise KeyError(f"unknown config key {key!r}")
        merged = dict(base.synthetic.to_dict())
        merged.update(synth)
        synthetic = SyntheticConfig.from_dict(merged)
        return replace(base, synthetic=synthetic, **direct)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw) if kind is not tuple else tuple(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig.from_flat(values)
    cfg.validate()
    return cfg
