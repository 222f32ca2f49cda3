"""Run configuration: every section of a pivdiffuser config file."""
from __future__ import annotations

import logging
import textwrap
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import tomlkit

from .defaults import FLOW_KINDS, FLOW_PARAMETERS
from .diffusion import DiffusionConfig
from .flowio import DataConfig
from .flows import AnalyticFlow
from .metrics import MetricOptions
from .network import ModelConfig
from .parameters import parse_value, read_parameter_file
from .plotting import PlotConfig
from .synthetic import GeneratorConfig
from .training import TrainConfig
from .widim import WidimConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'model': ModelConfig,
    'diffusion': DiffusionConfig,
    'train': TrainConfig,
    'data': DataConfig,
    'generator': GeneratorConfig,
    'widim': WidimConfig,
    'metrics': MetricOptions,
    'plot': PlotConfig,
}

FLOW_PARAMETERS_SECTION = 'flow_parameters'


@dataclass
class RunConfig:
    """
    All parameters of a run.

    Each section is a ParametersBase dataclass; flow_parameters maps an
    analytic flow kind to parameter overrides for dataset generation.

    Examples
    --------
    Read a config file and override one key.

    >>> config = RunConfig.load('toy.toml', overrides=['train.total_steps=10'])
    >>> config.write('run/config.toml')
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    widim: WidimConfig = field(default_factory=WidimConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    plot: PlotConfig = field(default_factory=PlotConfig)
    flow_parameters: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> RunConfig:
        """Build from nested dictionaries, rejecting unknown sections and keys."""
        kwargs = dict()
        for name, section in values.items():
            if name == FLOW_PARAMETERS_SECTION:
                kwargs[name] = _check_flow_parameters(section)
                continue
            if name not in SECTIONS:
                raise ValueError(f'unknown config section \'{name}\'')
            if not isinstance(section, dict):
                raise ValueError(f'config section \'{name}\' must be a table')
            kwargs[name] = SECTIONS[name].from_dict(section, section=name)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        values = {name: getattr(self, name).to_dict() for name in SECTIONS}
        values[FLOW_PARAMETERS_SECTION] = {
            kind: dict(parameters) for kind, parameters in self.flow_parameters.items()
        }
        return values

    @classmethod
    def load(cls, filename: Union[str, Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
        """
        Read a config file, or start from defaults, then apply overrides.

        Parameters
        ----------
        filename, optional
            TOML config file.
        overrides, optional
            Strings 'section.key=value' with TOML values.
        """
        config = cls.from_dict(read_parameter_file(filename)) if filename is not None else cls()
        return config.with_overrides(overrides)

    def with_overrides(self, overrides: Sequence[str]) -> RunConfig:
        """Copy with 'section.key=value' overrides applied and validated."""
        if not overrides:
            return self
        values = self.to_dict()
        for override in overrides:
            key, separator, text = override.partition('=')
            if not separator:
                raise ValueError(f'override \'{override}\' is not section.key=value')
            path = key.strip().split('.')
            expected_depth = 3 if path[0] == FLOW_PARAMETERS_SECTION else 2
            if len(path) != expected_depth or not all(path):
                raise ValueError(f'override key \'{key}\' is not section.key')
            table = values
            for part in path[:-1]:
                if part not in table:
                    if table is values and part not in SECTIONS:
                        raise ValueError(f'unknown config section \'{part}\'')
                    table[part] = dict()
                table = table[part]
            table[path[-1]] = parse_value(text.strip())
        return RunConfig.from_dict(values)

    def analytic_flows(self, kinds: Sequence[str]) -> List[AnalyticFlow]:
        """Analytic flows of the given kinds with this config's parameters."""
        return [AnalyticFlow(kind, dict(self.flow_parameters.get(kind, {}))) for kind in kinds]

    def to_document(self, header: str = None) -> tomlkit.TOMLDocument:
        document = tomlkit.document()
        if header is not None:
            for line in textwrap.wrap(header, 70):
                document.add(tomlkit.comment(line))
        for name in SECTIONS:
            section = getattr(self, name)
            description = (type(section).__doc__ or '').strip().splitlines()[0]
            document.add(tomlkit.nl())
            document.add(tomlkit.comment(description))
            document.add(name, section.to_table())
        if self.flow_parameters:
            tables = tomlkit.table()
            for kind, parameters in self.flow_parameters.items():
                tables.add(kind, dict(parameters))
            document.add(tomlkit.nl())
            document.add(FLOW_PARAMETERS_SECTION, tables)
        return document

    def dumps(self, header: str = None) -> str:
        return tomlkit.dumps(self.to_document(header))

    def write(self, filename: Union[str, Path], header: str = None) -> Path:
        """Write the resolved config, replacing any existing file."""
        filename = Path(filename)
        filename.parent.mkdir(parents=True, exist_ok=True)
        filename.write_text(self.dumps(header))
        return filename


def _check_flow_parameters(section: Any) -> Dict[str, Dict[str, float]]:
    if not isinstance(section, dict):
        raise ValueError(f'config section \'{FLOW_PARAMETERS_SECTION}\' must be a table')
    checked = dict()
    for kind, parameters in section.items():
        if kind not in FLOW_KINDS:
            raise ValueError(f'unknown config key \'{FLOW_PARAMETERS_SECTION}.{kind}\'')
        if not isinstance(parameters, dict):
            raise ValueError(f'\'{FLOW_PARAMETERS_SECTION}.{kind}\' must be a table')
        for name, value in parameters.items():
            if name not in FLOW_PARAMETERS[kind]:
                raise ValueError(f'unknown config key \'{FLOW_PARAMETERS_SECTION}.{kind}.{name}\'')
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f'\'{FLOW_PARAMETERS_SECTION}.{kind}.{name}\' must be a number')
        checked[kind] = {name: float(value) for name, value in parameters.items()}
    return checked
