"""
Run configuration: dataclasses, the key-value file format and its parser

File format:

    # comment
    seed = 7
    [ppo]
    epochs = 8
    clip = 0.2
    [codec]
    steps = [4, 2, 1, 0.5, 0.25]

Keys before the first section header belong to the ``run`` section.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .allocator import PPOConfig
from .errors import ConfigError
from .lexer import Lexer
from .metrics import MetricWeights
from .tokens import Token, TokenType


@dataclass
class RunSection:
    seed: int = 0
    mode: str = "ppo"
    log_level: str = "INFO"


@dataclass
class PathsConfig:
    train_dir: str = "data/train"
    output_dir: str = "out"
    checkpoint: str = "out/codec.dckp"
    policy_checkpoint: str = ""


@dataclass
class CodecConfig:
    block_size: int = 16
    latent_channels: int = 8
    encoder_hidden: Tuple[int, ...] = (32, 64)
    steps: Tuple[float, ...] = (4.0, 2.0, 1.0, 0.5, 0.25)


@dataclass
class BudgetConfig:
    rmax_bits: float = 0.0
    target_ratio: float = 0.0


@dataclass
class DiffusionConfig:
    schedule_steps: int = 50
    base_channels: int = 32
    sampler_steps: int = 0
    adapt_sampler_steps: int = 10
    stochastic: bool = False
    clip_denoised: bool = True


@dataclass
class MetricsConfig:
    fidelity: float = 1.0
    structure: float = 0.5
    lpips: float = 0.2
    dists: float = 0.2
    perceptual: Tuple[str, ...] = ("lpips-proxy", "dists-proxy")

    def weights(self) -> MetricWeights:
        return MetricWeights(self.fidelity, self.structure, self.lpips, self.dists)


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    rate_weight: float = 0.01
    refit_interval: int = 50
    log_interval: int = 50


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsConfig = field(default_factory=PathsConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def resolve_r_max(self, pixels: int) -> float:
        """Bit budget for an image, from rmax_bits or from the target compression ratio"""
        if self.budget.rmax_bits > 0:
            return float(self.budget.rmax_bits)
        if self.budget.target_ratio > 0:
            return 24.0 * pixels / self.budget.target_ratio
        raise ConfigError("no bit budget: set budget.rmax_bits or budget.target_ratio")

    def to_text(self) -> str:
        lines = []
        for section in fields(self):
            lines.append(f"[{section.name}]")
            group = getattr(self, section.name)
            for item in fields(group):
                lines.append(f"{item.name} = {format_value(getattr(group, item.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, section: str, **values) -> "RunConfig":
        group = getattr(self, section)
        return replace(self, **{section: replace(group, **values)})


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    return repr(value)


class ConfigParser:
    """Builds {section: {key: value}} from tokens"""

    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.position = 0
        self.current_token = tokens[0] if tokens else None

    def error(self, message: str):
        if self.current_token:
            raise ConfigError(f"Config error at line {self.current_token.line}, "
                              f"column {self.current_token.column}: {message}")
        raise ConfigError(f"Config error: {message}")

    def advance(self) -> Token:
        token = self.current_token
        if self.position < len(self.tokens) - 1:
            self.position += 1
            self.current_token = self.tokens[self.position]
        return token

    def expect(self, token_type: TokenType) -> Token:
        if self.current_token and self.current_token.type == token_type:
            return self.advance()
        self.error(f"Expected {token_type.name}, got {self.current_token.type.name if self.current_token else 'EOF'}")

    def parse(self) -> Dict[str, Dict[str, Any]]:
        sections: Dict[str, Dict[str, Any]] = {"run": {}}
        current = "run"
        while self.current_token.type != TokenType.EOF:
            if self.current_token.type == TokenType.NEWLINE:
                self.advance()
            elif self.current_token.type == TokenType.LBRACKET:
                self.advance()
                current = self.expect(TokenType.IDENTIFIER).value
                self.expect(TokenType.RBRACKET)
                self.expect(TokenType.NEWLINE)
                sections.setdefault(current, {})
            else:
                key_token = self.expect(TokenType.IDENTIFIER)
                self.expect(TokenType.EQUALS)
                value = self.parse_value()
                self.expect(TokenType.NEWLINE)
                if key_token.value in sections[current]:
                    raise ConfigError(f"duplicate key '{current}.{key_token.value}' at line {key_token.line}")
                sections[current][key_token.value] = value
        return sections

    def parse_value(self) -> Any:
        token = self.current_token
        if token.type in (TokenType.NUMBER, TokenType.STRING, TokenType.BOOLEAN):
            return self.advance().value
        if token.type == TokenType.LBRACKET:
            self.advance()
            items = []
            while self.current_token.type != TokenType.RBRACKET:
                if items:
                    self.expect(TokenType.COMMA)
                if self.current_token.type not in (TokenType.NUMBER, TokenType.STRING):
                    self.error("list items must be numbers or strings")
                items.append(self.advance().value)
            self.expect(TokenType.RBRACKET)
            return items
        self.error(f"Expected a value, got {token.type.name}")


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        kind = type(default[0]) if default else None
        if kind is str and not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where} must be a list of strings")
        if kind in (int, float) and not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        if kind is int and not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return tuple(kind(v) for v in value) if kind else tuple(value)
    raise ConfigError(f"{where} has an unsupported type")


def build_config(sections: Dict[str, Dict[str, Any]], base: Optional[RunConfig] = None) -> RunConfig:
    config = base or RunConfig()
    known = {f.name for f in fields(config)}
    for section, values in sections.items():
        if section not in known:
            raise ConfigError(f"unknown config section '{section}'")
        group = getattr(config, section)
        defaults = {f.name: getattr(group, f.name) for f in fields(group)}
        updates = {}
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            updates[key] = _coerce(section, key, defaults[key], value)
        try:
            config = replace(config, **{section: replace(group, **updates)})
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] values: {exc}") from exc
    return config


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    return build_config(ConfigParser(Lexer(text).tokenize()).parse(), base)


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)
