"""
Token definitions for the run configuration format
"""

from enum import Enum, auto
from dataclasses import dataclass
from typing import Any


class TokenType(Enum):
    # Structural
    LBRACKET = auto()        # [
    RBRACKET = auto()        # ]
    COMMA = auto()           # ,
    EQUALS = auto()          # =
    NEWLINE = auto()         # end of a logical line

    # Values
    IDENTIFIER = auto()      # section and key names
    NUMBER = auto()          # int or float, optional sign and exponent
    STRING = auto()          # quoted text
    BOOLEAN = auto()         # true / false
    EOF = auto()


@dataclass
class Token:
    type: TokenType
    value: Any
    line: int
    column: int

    def __repr__(self):
        return f"Token({self.type.name}, {self.value!r}, {self.line},{self.column})"
