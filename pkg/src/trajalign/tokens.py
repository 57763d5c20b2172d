import re

_WS = re.compile(r"\s+")

CJK_LANGS = frozenset({"zh", "ja", "ko"})


def count_tokens(text: str, lang: str = "en") -> int:
    """Whitespace tokens, or non-whitespace characters for CJK languages."""
    if lang in CJK_LANGS:
        return sum(1 for ch in text if not ch.isspace())
    return len(text.split())


def truncate_tokens(text: str, budget: int, lang: str = "en") -> str:
    """Longest prefix of ``text`` holding at most ``budget`` tokens.

    The prefix is cut from the original string so whitespace inside it is
    preserved verbatim.
    """
    if budget <= 0:
        return ""
    if count_tokens(text, lang) <= budget:
        return text
    if lang in CJK_LANGS:
        seen = 0
        for i, ch in enumerate(text):
            if not ch.isspace():
                seen += 1
                if seen == budget:
                    return text[: i + 1]
        return text
    ends = [m.end() for m in re.finditer(r"\S+", text)]
    return text[: ends[budget - 1]]
