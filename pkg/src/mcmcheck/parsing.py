"""Shared tokenizer for the program and memory-model file formats.

Both formats are line-comment (#) based and built from identifiers,
integers and a small set of punctuation tokens, so they share one
scanner.
"""

from __future__ import annotations


class ParseError(Exception):
    """Raised on malformed input; carries a 1-based source position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.message = message
        self.line = line
        self.col = col


# Multi-character operators must come before their prefixes.
_PUNCT = [
    "!=", "==", "<=", ">=", "->",
    "{", "}", "(", ")", "[", "]", ":", ",", ";", "=", "<", ">",
    "+", "-", "*", "!",
]

_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | set("0123456789")


class Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind: str, text: str, line: int, col: int):
        self.kind = kind  # 'ident' | 'int' | 'punct' | 'string' | 'eof'
        self.text = text
        self.line = line
        self.col = col

    def __repr__(self):
        return f"Token({self.kind!r}, {self.text!r}, {self.line}:{self.col})"


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    line = 1
    col = 1
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == '"':
            j = i + 1
            while j < n and text[j] not in '"\n':
                j += 1
            if j >= n or text[j] != '"':
                raise ParseError("unterminated string", line, col)
            toks.append(Token("string", text[i + 1:j], line, col))
            col += j + 1 - i
            i = j + 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(Token("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c in _IDENT_START:
            j = i
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            toks.append(Token("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        for p in _PUNCT:
            if text.startswith(p, i):
                toks.append(Token("punct", p, line, col))
                col += len(p)
                i += len(p)
                break
        else:
            raise ParseError(f"unexpected character {c!r}", line, col)
    toks.append(Token("eof", "", line, col))
    return toks


class TokenStream:
    """Cursor over a token list with the usual expect/accept helpers."""

    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.pos = 0

    def peek(self) -> Token:
        return self.toks[self.pos]

    def next(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def at_punct(self, text: str) -> bool:
        t = self.peek()
        return t.kind == "punct" and t.text == text

    def at_ident(self, text: str | None = None) -> bool:
        t = self.peek()
        return t.kind == "ident" and (text is None or t.text == text)

    def accept_punct(self, text: str) -> bool:
        if self.at_punct(text):
            self.pos += 1
            return True
        return False

    def accept_ident(self, text: str) -> bool:
        if self.at_ident(text):
            self.pos += 1
            return True
        return False

    def expect_punct(self, text: str) -> Token:
        t = self.peek()
        if not self.at_punct(text):
            raise ParseError(f"expected {text!r}, found {t.text!r}", t.line, t.col)
        return self.next()

    def expect_ident(self, what: str = "identifier") -> Token:
        t = self.peek()
        if t.kind != "ident":
            raise ParseError(f"expected {what}, found {t.text!r}", t.line, t.col)
        return self.next()

    def expect_keyword(self, word: str) -> Token:
        t = self.peek()
        if not (t.kind == "ident" and t.text == word):
            raise ParseError(f"expected {word!r}, found {t.text!r}", t.line, t.col)
        return self.next()

    def expect_int(self) -> int:
        t = self.peek()
        if t.kind != "int":
            raise ParseError(f"expected integer, found {t.text!r}", t.line, t.col)
        self.next()
        return int(t.text)

    def expect_eof(self):
        t = self.peek()
        if t.kind != "eof":
            raise ParseError(f"unexpected trailing input {t.text!r}", t.line, t.col)

    def error(self, message: str):
        t = self.peek()
        raise ParseError(message, t.line, t.col)
