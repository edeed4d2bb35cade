import html
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from errors import DataFormatError, SubtitleParseError

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_GAP_MS = 1500

SRT_TIMING = re.compile(
    r"^\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})\s*-->\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})(?:\s.*)?$"
)
VTT_HEADER = re.compile(r"^WEBVTT(?:[ \t].*)?$")
VTT_TIMING = re.compile(
    r"^\s*(?:(\d+):)?(\d{2}):(\d{2})\.(\d{3})\s+-->\s+(?:(\d+):)?(\d{2}):(\d{2})\.(\d{3})(?:\s+.*)?$"
)
TAG = re.compile(r"<[^>]*>")
WHITESPACE = re.compile(r"\s+")
# closing quotes/brackets may follow the terminal mark
SENTENCE_END = re.compile(r"[.!?…][\"'”’)\]]*$")


@dataclass(frozen=True)
class Cue:
    index: int
    start_ms: int
    end_ms: int
    text: str

    @property
    def midpoint_x2(self) -> int:
        """Twice the midpoint, kept integral"""
        return self.start_ms + self.end_ms


@dataclass(frozen=True)
class Transcript:
    video_id: str
    cues: Tuple[Cue, ...] = field(default_factory=tuple)
    language: str = "en"

    def by_index(self):
        return {cue.index: cue for cue in self.cues}

    def to_dict(self):
        return {
            "video_id": self.video_id,
            "language": self.language,
            "cues": [
                {"index": c.index, "start_ms": c.start_ms, "end_ms": c.end_ms, "text": c.text}
                for c in self.cues
            ],
        }


@dataclass(frozen=True)
class SentenceSpan:
    start_ms: int
    end_ms: int
    cue_indices: Tuple[int, ...]
    text: str


def _decode(data: bytes) -> List[str]:
    """Decode UTF-8 (BOM tolerated) and split into LF-normalized lines"""
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise SubtitleParseError(f"not valid UTF-8: {e}") from e
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return text.split("\n")


def _blocks(lines: Sequence[str]):
    """Yield (first line number, lines) for each blank-line separated block"""
    block, start = [], None
    for number, line in enumerate(lines, start=1):
        if line.strip():
            if start is None:
                start = number
            block.append(line)
        elif block:
            yield start, block
            block, start = [], None
    if block:
        yield start, block


def clean_text(lines: Sequence[str], entities: bool = False) -> str:
    """Strip markup tags (and character references when asked), collapse whitespace"""
    text = TAG.sub("", " ".join(lines))
    if entities:
        text = html.unescape(text)
    return WHITESPACE.sub(" ", text).strip()


def _ms(hours, minutes, seconds, millis) -> int:
    hours = int(hours or 0)
    return ((hours * 60 + int(minutes)) * 60 + int(seconds)) * 1000 + int(millis.ljust(3, "0"))


def _finish(video_id: str, cues: List[Cue], language: str) -> Transcript:
    cues.sort(key=lambda c: (c.start_ms, c.index))
    return Transcript(video_id=video_id, cues=tuple(cues), language=language)


def _make_cue(index, start_ms, end_ms, text_lines, line_number, cues, seen, entities=False):
    """Validate one block and append its cue"""
    if end_ms < start_ms:
        raise SubtitleParseError(f"cue {index} ends before it starts", line=line_number)
    if end_ms == start_ms:
        logger.warning(f"Dropping zero-length cue {index} at line {line_number}")
        return
    if index in seen:
        raise SubtitleParseError(f"duplicate cue index {index}", line=line_number)
    text = clean_text(text_lines, entities=entities)
    if not text:
        logger.debug(f"Dropping empty cue {index} at line {line_number}")
        return
    seen.add(index)
    cues.append(Cue(index=index, start_ms=start_ms, end_ms=end_ms, text=text))


def parse_srt(data: bytes, video_id: str = "", language: str = "en") -> Transcript:
    """Parse SubRip bytes into a sorted, normalized Transcript"""
    lines = _decode(data)
    cues: List[Cue] = []
    seen = set()
    ordinal = 0
    for start_line, block in _blocks(lines):
        ordinal += 1
        offset = 0
        index = ordinal
        if not SRT_TIMING.match(block[0]):
            if not block[0].strip().isdigit():
                raise SubtitleParseError(f"expected cue index, got {block[0].strip()!r}", line=start_line)
            index = int(block[0].strip())
            offset = 1
        if offset >= len(block):
            raise SubtitleParseError("missing timestamp line", line=start_line)
        timing_line = start_line + offset
        match = SRT_TIMING.match(block[offset])
        if not match:
            raise SubtitleParseError(f"malformed timestamp {block[offset].strip()!r}", line=timing_line)
        g = match.groups()
        _make_cue(index, _ms(*g[0:4]), _ms(*g[4:8]), block[offset + 1:], timing_line, cues, seen)
    return _finish(video_id, cues, language)


def parse_vtt(data: bytes, video_id: str = "", language: str = "en") -> Transcript:
    """Parse WebVTT bytes; settings, NOTE/STYLE/REGION blocks and identifiers are ignored"""
    lines = _decode(data)
    if not lines or not VTT_HEADER.match(lines[0]):
        raise DataFormatError("missing WEBVTT header")
    cues: List[Cue] = []
    seen = set()
    ordinal = 0
    blocks = iter(_blocks(lines))
    next(blocks, None)  # header block
    for start_line, block in blocks:
        keyword = block[0].split(maxsplit=1)[0] if block[0].split() else ""
        if keyword in ("NOTE", "STYLE", "REGION"):
            continue
        timing_at = next((i for i, line in enumerate(block[:2]) if "-->" in line), None)
        if timing_at is None:
            raise SubtitleParseError("cue block without timing line", line=start_line)
        match = VTT_TIMING.match(block[timing_at])
        if not match:
            raise SubtitleParseError(f"malformed timing {block[timing_at].strip()!r}", line=start_line + timing_at)
        ordinal += 1
        g = match.groups()
        _make_cue(ordinal, _ms(*g[0:4]), _ms(*g[4:8]), block[timing_at + 1:], start_line + timing_at, cues, seen,
                  entities=True)
    return _finish(video_id, cues, language)


def load_transcript(path, video_id: Optional[str] = None, language: str = "en") -> Transcript:
    """Read a .srt or .vtt file"""
    path = Path(path)
    video_id = video_id if video_id is not None else path.stem
    suffix = path.suffix.lower()
    if suffix == ".srt":
        return parse_srt(path.read_bytes(), video_id=video_id, language=language)
    if suffix == ".vtt":
        return parse_vtt(path.read_bytes(), video_id=video_id, language=language)
    raise DataFormatError(f"unsupported subtitle format: {path.name}")


def format_srt_time(ms: int) -> str:
    hours, rest = divmod(ms, 3_600_000)
    minutes, rest = divmod(rest, 60_000)
    seconds, millis = divmod(rest, 1000)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d},{millis:03d}"


def write_srt(transcript: Transcript) -> str:
    """Canonical SRT rendering: LF endings, one blank line between blocks"""
    blocks = [
        f"{cue.index}\n{format_srt_time(cue.start_ms)} --> {format_srt_time(cue.end_ms)}\n{cue.text}\n"
        for cue in transcript.cues
    ]
    return "\n".join(blocks)


def sentence_spans(transcript: Transcript, gap_ms: int = DEFAULT_GAP_MS) -> List[SentenceSpan]:
    """Group cues into sentences ended by terminal punctuation or a silence longer than gap_ms"""
    spans: List[SentenceSpan] = []
    pending: List[Cue] = []
    cues = transcript.cues
    for position, cue in enumerate(cues):
        pending.append(cue)
        last = position == len(cues) - 1
        punctuated = bool(SENTENCE_END.search(cue.text))
        silent = not last and cues[position + 1].start_ms - cue.end_ms > gap_ms
        if punctuated or silent or last:
            spans.append(SentenceSpan(
                start_ms=pending[0].start_ms,
                end_ms=cue.end_ms,
                cue_indices=tuple(c.index for c in pending),
                text=" ".join(c.text for c in pending),
            ))
            pending = []
    return spans
