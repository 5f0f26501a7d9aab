"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration document violates an invariant; names the offending field."""


class DecodeError(ValueError):
    """Bytes could not be decoded into a message.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
