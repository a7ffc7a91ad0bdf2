"""Parameter groups.

Every tunable of the simulator lives in a dataclass that derives from
``Params``.  ``Params.from_dict`` is the declared parameter schema: unknown
keys and values of the wrong type are rejected with ``ConfigError``, so a
typo in a config file never silently falls back to a default.

    >>> from dataclasses import dataclass
    >>> @dataclass(frozen=True)
    ... class Knobs(Params):
    ...     alpha: float = 5.0
    ...     retries: int = 1
    >>> Knobs.from_dict({'alpha': 2})
    Knobs(alpha=2.0, retries=1)
    >>> Knobs.from_dict({'alpah': 2})
    Traceback (most recent call last):
      ...
    vulcan.errors.ConfigError: Knobs: unknown parameter 'alpah'

"""

import dataclasses

from vulcan.errors import ConfigError


class Params:
    """Mixin for frozen dataclasses holding parameters."""

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ConfigError(
                f"{cls.__name__}: expected a mapping, got {data!r}")
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(
                    f"{cls.__name__}: unknown parameter {key!r}")
            kwargs[key] = coerce(f"{cls.__name__}.{key}", value,
                                 getattr(defaults, key))
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{cls.__name__}: {e}")

    def to_dict(self):
        return {f.name: plain(getattr(self, f.name))
                for f in dataclasses.fields(self)}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def coerce(where, value, default):
    """Convert ``value`` to the type of ``default`` or raise ConfigError."""
    if isinstance(default, Params):
        return type(default).from_dict(value)
    if default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            if len(default) == len(value):
                return tuple(coerce(where, v, d)
                             for v, d in zip(value, default))
            return tuple(value)
    else:
        return value
    raise ConfigError(
        f"{where}: expected {type(default).__name__}, got {value!r}")


def plain(value):
    """Turn parameter values into JSON-ready structures."""
    if isinstance(value, Params):
        return value.to_dict()
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    return value


def check_unit_interval(owner, **values):
    for name, value in values.items():
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{owner}: {name} must lie in [0, 1],"
                              f" got {value}")


def check_non_negative(owner, **values):
    for name, value in values.items():
        if value < 0:
            raise ConfigError(f"{owner}: {name} must be non-negative,"
                              f" got {value}")
