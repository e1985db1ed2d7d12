"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

from typing import Any, Callable, Iterator, TypeVar, overload

from typing_extensions import Self

from .errors import ConfigError


T = TypeVar('T', bound='BaseFlags')


class BaseFlags:
    __slots__ = ('value',)

    VALID_FLAGS: dict[str, int] = {}

    def __init__(self, value: int = 0, **kwargs: bool) -> None:
        self.value = value
        for key, toggle in kwargs.items():
            if key not in self.VALID_FLAGS:
                raise TypeError(f'{key!r} is not a valid flag name.')
            setattr(self, key, toggle)

    def __init_subclass__(cls) -> None:
        super().__init_subclass__()
        cls.VALID_FLAGS = {name: v.flag for name, v in cls.__dict__.items() if isinstance(v, flag_value)}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, self.__class__) and self.value == other.value

    def __hash__(self) -> int:
        return hash(self.value)

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__} value={self.value}>'

    def __iter__(self) -> Iterator[tuple[str, bool]]:
        for name in self.VALID_FLAGS:
            yield name, getattr(self, name)

    @classmethod
    def all(cls) -> Self:
        value = 0
        for flag in cls.VALID_FLAGS.values():
            value |= flag
        return cls(value)

    @classmethod
    def none(cls) -> Self:
        return cls(0)

    def is_empty(self) -> bool:
        return self.value == 0

    def _has_flag(self, o: int) -> bool:
        return (self.value & o) == o

    def _set_flag(self, o: int, toggle: bool) -> None:
        if toggle is True:
            self.value |= o
        elif toggle is False:
            self.value &= ~o
        else:
            raise TypeError(f'Value to set for {self.__class__.__name__} must be a bool.')


class flag_value:
    def __init__(self, func: Callable[[Any], int]) -> None:
        self.flag: int = func(None)
        self.__doc__ = func.__doc__

    @overload
    def __get__(self, instance: None, owner: type[Any]) -> Self: ...

    @overload
    def __get__(self, instance: T, owner: type[T]) -> bool: ...

    def __get__(self, instance: T | None, owner: type[T]) -> Any:
        if instance is None:
            return self
        return instance._has_flag(self.flag)

    def __set__(self, instance: BaseFlags, value: bool) -> None:
        instance._set_flag(self.flag, value)

    def __repr__(self) -> str:
        return f'<flag_value flag={self.flag!r}>'


class AblationFlags(BaseFlags):
    """Switches for the three ablatable components of dca finetuning.

    All three on is the full method. All three off degenerates to plain
    contrastive finetuning on the source stream.
    """

    __slots__ = ()

    @flag_value
    def domain_descriptions(self) -> int:
        """The diffusion stream: style captions teach the domain head (C3-C6)."""
        return 1 << 0

    @flag_value
    def disentanglement(self) -> int:
        """Squared-cosine disentanglement terms (C2, C3, C4)."""
        return 1 << 1

    @flag_value
    def mllm_hidden_states(self) -> int:
        """Agreement between style captions and projected hidden states (C6)."""
        return 1 << 2

    @classmethod
    def parse(cls, argument: str) -> AblationFlags:
        """Parses ``all``, ``none`` or a comma separated list of flag names."""
        cleaned = argument.strip().lower()
        if cleaned in ('all', 'full'):
            return cls.all()
        if cleaned in ('none', ''):
            return cls.none()
        self = cls.none()
        for part in cleaned.split(','):
            name = part.strip().replace('-', '_')
            if name not in cls.VALID_FLAGS:
                raise ConfigError(f'Unknown ablation flag {part.strip()!r}')
            setattr(self, name, True)
        return self

    def to_names(self) -> list[str]:
        return [name for name, enabled in self if enabled]

    def to_dict(self) -> dict[str, bool]:
        return dict(self)
