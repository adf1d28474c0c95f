"""
Lexer for the run configuration format
"""

from typing import List, Optional

from .errors import ConfigError
from .tokens import Token, TokenType

KEYWORDS = {"true": True, "false": False}
SINGLE_CHAR = {
    "[": TokenType.LBRACKET,
    "]": TokenType.RBRACKET,
    ",": TokenType.COMMA,
    "=": TokenType.EQUALS,
}


class Lexer:
    def __init__(self, source: str):
        self.source = source
        self.position = 0
        self.line = 1
        self.column = 1
        self.tokens: List[Token] = []

    def error(self, message: str):
        raise ConfigError(f"Config error at line {self.line}, column {self.column}: {message}")

    def peek(self, offset: int = 0) -> Optional[str]:
        pos = self.position + offset
        if pos < len(self.source):
            return self.source[pos]
        return None

    def advance(self) -> Optional[str]:
        if self.position < len(self.source):
            char = self.source[self.position]
            self.position += 1
            if char == '\n':
                self.line += 1
                self.column = 1
            else:
                self.column += 1
            return char
        return None

    def skip_blanks(self):
        while self.peek() and self.peek() in ' \t\r':
            self.advance()

    def skip_comment(self) -> bool:
        if self.peek() == '#':
            while self.peek() and self.peek() != '\n':
                self.advance()
            return True
        return False

    def read_number(self) -> Token:
        start_line, start_column = self.line, self.column
        text = ''
        if self.peek() in '+-':
            text += self.advance()
        while self.peek() and (self.peek().isdigit() or self.peek() in '._'):
            text += self.advance()
        if self.peek() and self.peek() in 'eE':
            text += self.advance()
            if self.peek() and self.peek() in '+-':
                text += self.advance()
            while self.peek() and self.peek().isdigit():
                text += self.advance()
        try:
            is_float = any(c in text for c in '.eE')
            value = float(text) if is_float else int(text)
        except ValueError:
            self.error(f"Invalid number: {text}")
        return Token(TokenType.NUMBER, value, start_line, start_column)

    def read_string(self) -> Token:
        start_line, start_column = self.line, self.column
        quote_char = self.advance()
        value = ''
        while self.peek() and self.peek() not in (quote_char, '\n'):
            char = self.advance()
            if char == '\\' and self.peek():
                escaped = self.advance()
                value += {'n': '\n', 't': '\t'}.get(escaped, escaped)
            else:
                value += char
        if self.peek() != quote_char:
            self.error("Unterminated string")
        self.advance()
        return Token(TokenType.STRING, value, start_line, start_column)

    def read_identifier(self) -> Token:
        start_line, start_column = self.line, self.column
        ident = ''
        while self.peek() and (self.peek().isalnum() or self.peek() in '-_.'):
            ident += self.advance()
        if ident in KEYWORDS:
            return Token(TokenType.BOOLEAN, KEYWORDS[ident], start_line, start_column)
        return Token(TokenType.IDENTIFIER, ident, start_line, start_column)

    def tokenize(self) -> List[Token]:
        self.tokens = []
        while self.position < len(self.source):
            self.skip_blanks()
            if self.position >= len(self.source):
                break
            if self.skip_comment():
                continue

            char = self.peek()
            if char == '\n':
                self.tokens.append(Token(TokenType.NEWLINE, '\n', self.line, self.column))
                self.advance()
            elif char.isdigit() or (char in '+-.' and (self.peek(1) or '').isdigit()):
                self.tokens.append(self.read_number())
            elif char in '"\'':
                self.tokens.append(self.read_string())
            elif char.isalpha() or char == '_':
                self.tokens.append(self.read_identifier())
            elif char in SINGLE_CHAR:
                self.tokens.append(Token(SINGLE_CHAR[char], char, self.line, self.column))
                self.advance()
            else:
                self.error(f"Unexpected character: {char!r}")

        self.tokens.append(Token(TokenType.NEWLINE, '\n', self.line, self.column))
        self.tokens.append(Token(TokenType.EOF, None, self.line, self.column))
        return self.tokens
