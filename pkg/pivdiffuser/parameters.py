"""Parameter dataclasses stored as TOML."""
from __future__ import annotations

import dataclasses
import pathlib
import textwrap
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Union

import tomlkit


@dataclass
class ParametersBase:
    """Parameters base class.

    Subclasses are dataclasses whose fields carry a 'description' in
    their metadata. The description is written as a TOML comment above
    each key.
    """

    def check_consistency(self) -> None:
        pass

    def to_table(self) -> tomlkit.items.Table:
        """Convert to a TOML table with descriptions as comments."""
        table = tomlkit.table()
        for param in dataclasses.fields(self):
            for desc in textwrap.wrap(param.metadata.get('description', ''), 70):
                table.add(tomlkit.comment(desc))
            table.add(param.name, _to_toml_value(getattr(self, param.name)))
        return table

    def to_dict(self) -> Dict[str, Any]:
        """Convert to a plain dictionary."""
        return {
            param.name: _to_toml_value(getattr(self, param.name))
            for param in dataclasses.fields(self)
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any], *, section: str = None) -> ParametersBase:
        """Create from a dictionary, rejecting unknown keys.

        Parameters
        ----------
        values
            Mapping of field name to value. Missing fields take their
            defaults.

        Optional Parameters
        -------------------
        section
            Section name used in error messages.

        Returns
        -------
        ParametersBase
            The parameters, after check_consistency.
        """
        defaults = cls()
        names = {param.name for param in dataclasses.fields(cls)}
        kwargs = dict()
        for key, value in values.items():
            if key not in names:
                dotted = f'{section}.{key}' if section else key
                raise ValueError(f'unknown config key \'{dotted}\'')
            kwargs[key] = _coerce(value, getattr(defaults, key))
        parameters = cls(**kwargs)
        parameters.check_consistency()
        return parameters


def read_parameter_file(filename: Union[str, Path]) -> dict:
    """
    Read parameters from TOML file.

    Parameters
    ----------
    filename : str or Path
        The name of the file to read. Should have extension '.toml'.

    Returns
    -------
    dict
        A dictionary representation of the parameters file, with
        nested tables as dictionaries and arrays as tuples.
    """
    if not pathlib.Path(filename).exists():
        raise ValueError(f'parameter file {filename} does not exist')

    with open(filename, 'r') as fp:
        try:
            document = tomlkit.loads(fp.read())
        except tomlkit.exceptions.ParseError as err:
            raise ValueError(f'cannot parse {filename}: {err}') from err

    return _from_toml_value(document.unwrap())


def parse_value(text: str) -> Any:
    """Parse a command-line value as a TOML value, falling back to string."""
    try:
        return _from_toml_value(tomlkit.loads(f'value = {text}').unwrap()['value'])
    except tomlkit.exceptions.ParseError:
        return text


def _to_toml_value(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_to_toml_value(val) for val in value]
    if isinstance(value, dict):
        return {key: _to_toml_value(val) for key, val in value.items()}
    return value


def _from_toml_value(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_from_toml_value(val) for val in value)
    if isinstance(value, dict):
        return {key: _from_toml_value(val) for key, val in value.items()}
    return value


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f'expected a boolean, got {value!r}')
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value
