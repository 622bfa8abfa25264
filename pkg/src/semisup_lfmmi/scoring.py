"""Transcript normalization and word error rate by channel."""
from dataclasses import dataclass, field
from importlib import resources

from .errors import ContractError, ParseError

CHANNELS = ("agent", "caller")
PARTIAL_MARK = "-"
_SECTIONS = ("FILLERS", "COMPOUNDS", "COLLOQUIAL")


@dataclass(frozen=True)
class NormalizationRules:
    fillers: frozenset = frozenset({"uh", "um", "ah", "er"})
    # multi-token variant -> canonical single token
    compounds: dict = field(default_factory=lambda: {("fire", "stone"): "firestone"})
    colloquial: dict = field(default_factory=lambda: {("going", "to"): "gonna"})

    def __post_init__(self):
        if any(f != f.lower() for f in self.fillers):
            raise ContractError("fillers must be lowercase")

    @property
    def phrases(self):
        out = dict(self.compounds)
        out.update(self.colloquial)
        return out


def load_rules(text):
    """Parse a rules file with [FILLERS], [COMPOUNDS] and [COLLOQUIAL] sections."""
    section = None
    fillers, tables = set(), {"COMPOUNDS": {}, "COLLOQUIAL": {}}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().upper()
            if section not in _SECTIONS:
                raise ParseError(f"line {n}: unknown section {section!r}")
            continue
        if section is None:
            raise ParseError(f"line {n}: entry outside a section")
        if section == "FILLERS":
            fillers.update(line.lower().split())
            continue
        if "=" not in line:
            raise ParseError(f"line {n}: expected 'variant = canonical'")
        variant, canonical = (x.split() for x in line.lower().split("=", 1))
        if len(canonical) != 1 or not variant:
            raise ParseError(f"line {n}: canonical form must be one token")
        if variant != canonical:
            tables[section][tuple(variant)] = canonical[0]
    return NormalizationRules(frozenset(fillers), tables["COMPOUNDS"], tables["COLLOQUIAL"])


def default_rules():
    text = resources.files(__package__).joinpath("data/normalization.rules").read_text()
    return load_rules(text)


def _one_pass(tokens, rules, phrases, longest):
    out, i = [], 0
    while i < len(tokens):
        if tokens[i] in rules.fillers:
            i += 1
            continue
        for n in range(min(longest, len(tokens) - i), 0, -1):
            canon = phrases.get(tuple(tokens[i:i + n]))
            if canon is not None:
                out.append(canon)
                i += n
                break
        else:
            out.append(tokens[i])
            i += 1
    return out


def normalize(tokens, rules=None):
    """Drop fillers and map variants to canonical tokens (longest match
    first, repeated until nothing changes).  Partial words are kept."""
    rules = rules or NormalizationRules()
    phrases = rules.phrases
    longest = max((len(k) for k in phrases), default=1)
    cur = list(tokens)
    while True:
        nxt = _one_pass(cur, rules, phrases, longest)
        if nxt == cur:
            return nxt
        cur = nxt


def tokens_match(a, b):
    """Equality, or prefix match when either side is a partial word."""
    if a == b:
        return True
    pa, pb = a.endswith(PARTIAL_MARK) and len(a) > 1, b.endswith(PARTIAL_MARK) and len(b) > 1
    sa = a[:-1] if pa else a
    sb = b[:-1] if pb else b
    if pa and pb:
        return sa.startswith(sb) or sb.startswith(sa)
    if pa:
        return sb.startswith(sa)
    if pb:
        return sa.startswith(sb)
    return False


@dataclass(frozen=True)
class WerCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_tokens: int = 0
    utterances: int = 0

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def undefined(self):
        """No reference tokens but some hypothesis tokens."""
        return self.ref_tokens == 0 and self.errors > 0

    @property
    def empty(self):
        return self.utterances == 0

    @property
    def wer(self):
        """Percentage; None when undefined."""
        if self.ref_tokens == 0:
            return None if self.errors else 0.0
        return 100.0 * self.errors / self.ref_tokens

    def __add__(self, other):
        return WerCounts(self.substitutions + other.substitutions,
                         self.insertions + other.insertions,
                         self.deletions + other.deletions,
                         self.ref_tokens + other.ref_tokens,
                         self.utterances + other.utterances)


def wer(ref, hyp):
    """Levenshtein counts with unit costs; equal-cost ties prefer
    substitution, then deletion, then insertion."""
    ref, hyp = list(ref), list(hyp)
    R, H = len(ref), len(hyp)
    cost = [[0] * (H + 1) for _ in range(R + 1)]
    for i in range(1, R + 1):
        cost[i][0] = i
    for j in range(1, H + 1):
        cost[0][j] = j
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            diag = cost[i - 1][j - 1] + (0 if tokens_match(ref[i - 1], hyp[j - 1]) else 1)
            cost[i][j] = min(diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    s = ins = d = 0
    i, j = R, H
    while i or j:
        if i and j:
            hit = tokens_match(ref[i - 1], hyp[j - 1])
            if cost[i][j] == cost[i - 1][j - 1] + (0 if hit else 1):
                s += not hit
                i, j = i - 1, j - 1
                continue
        if i and cost[i][j] == cost[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerCounts(s, ins, d, R, 1)


@dataclass(frozen=True)
class WerReport:
    rows: dict  # "agent" / "caller" / "combined" -> WerCounts

    def percent(self, row):
        w = self.rows[row].wer
        return None if w is None else round(w, 1)

    def format(self):
        lines = [f"{'channel':<9} {'N':>6} {'S':>5} {'I':>5} {'D':>5} {'WER%':>6}"]
        for name in CHANNELS + ("combined",):
            c = self.rows[name]
            pct = "empty" if c.empty else ("undef" if c.undefined else f"{self.percent(name):.1f}")
            lines.append(f"{name:<9} {c.ref_tokens:>6} {c.substitutions:>5} "
                         f"{c.insertions:>5} {c.deletions:>5} {pct:>6}")
        return "\n".join(lines) + "\n"


def channel_report(results, channels):
    """Pool per-utterance counts ({utt: WerCounts}) by channel ({utt: tag})."""
    rows = {c: WerCounts() for c in CHANNELS}
    for utt in sorted(results):
        tag = channels.get(utt)
        if tag not in rows:
            raise ContractError(f"utterance {utt!r} has channel tag {tag!r}")
        rows[tag] = rows[tag] + results[utt]
    rows["combined"] = rows["agent"] + rows["caller"]
    return WerReport(rows)


def read_transcripts(text):
    """``utt_id channel token ...`` lines -> {utt: (channel, tokens)}."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise ParseError(f"line {n}: expected 'utt_id channel tokens'")
        if parts[0] in out:
            raise ParseError(f"line {n}: duplicate utterance {parts[0]!r}")
        out[parts[0]] = (parts[1], parts[2:])
    return out


def write_transcripts(entries):
    """{utt: (channel, tokens)} -> text, sorted by utterance id."""
    return "".join(" ".join([u, ch, *toks]) + "\n" for u, (ch, toks) in sorted(entries.items()))


def score(refs, hyps, rules=None):
    """WerReport for transcript dicts; a missing hypothesis counts as empty."""
    rules = rules or NormalizationRules()
    results, channels = {}, {}
    for utt, (channel, ref) in refs.items():
        hyp = hyps.get(utt, (channel, []))[1]
        results[utt] = wer(normalize(ref, rules), normalize(hyp, rules))
        channels[utt] = channel
    return channel_report(results, channels)
