import logging
import os
import re

from abc import ABC, abstractmethod
from typing import Dict, FrozenSet, Generic, List, NamedTuple, Optional, Sequence, Tuple, TypeVar

log = logging.getLogger(__name__)

T = TypeVar('T')

UNKNOWN_CATEGORY = "unknown"

# column order of the trailing genre flags in the ML-100K item file
MOVIELENS_GENRES: Tuple[str, ...] = (
    UNKNOWN_CATEGORY, "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
    "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

# ML-1M users.dat code tables
MOVIELENS_AGE_RANGES: Dict[int, str] = {
    1: "under 18", 18: "18-24", 25: "25-34", 35: "35-44", 45: "45-49", 50: "50-55", 56: "56 or older",
}
MOVIELENS_OCCUPATIONS: Tuple[str, ...] = (
    "other or not specified", "academic/educator", "artist", "clerical/admin", "college/grad student",
    "customer service", "doctor/health care", "executive/managerial", "farmer", "homemaker", "K-12 student",
    "lawyer", "programmer", "retired", "sales/marketing", "scientist", "self-employed", "technician/engineer",
    "tradesman/craftsman", "unemployed", "writer",
)
_GENDERS = {"M": "male", "F": "female"}

_TITLE_YEAR = re.compile(r"\s*\((\d{4})\)\s*$")


class ParseError(Exception):
    """Base class for problems found in a ratings or metadata file"""


class MalformedLineError(ParseError):

    def __init__(self, line_no: int, reason: str, source: str = "<input>") -> None:
        super().__init__(f"{source}:{line_no}: {reason}")
        self._line_no = line_no
        self._source = source

    @property
    def line_no(self) -> int:
        return self._line_no

    @property
    def source(self) -> str:
        return self._source


class MissingGenreHeaderError(ParseError):

    def __init__(self, source: str) -> None:
        super().__init__(f"{source}: header row with a 'genres' column is required")


RatingRecord = Tuple[int, int, int, int]
"""(user, item, rating, timestamp) as read from a ratings file"""


class ItemRecord(NamedTuple):
    item_id: int
    title: str
    year: Optional[int]
    categories: FrozenSet[str]


class LineParser(ABC):
    """
    Basic line-by-line parser interface
    """

    @abstractmethod
    def parse_line(self, line: str) -> None:
        """
        Parse the given line
        :param line: text of line to parse
        """


class RecordParser(LineParser, Generic[T]):
    """
    Line parser that turns every non-blank line into a record, collected in `records` in file order.
    Subclasses implement `parse_fields`, which may return None to skip a line (e.g. a header)
    """

    def __init__(self, source: str = "<input>") -> None:
        self._source = source
        self._line_no = 0
        self.records: List[T] = []

    @property
    def line_no(self) -> int:
        return self._line_no

    def malformed(self, reason: str) -> MalformedLineError:
        return MalformedLineError(self._line_no, reason, self._source)

    def parse_line(self, line: str) -> None:
        self._line_no += 1
        text = line.rstrip("\r\n")
        if not text.strip():
            return
        record = self.parse_fields(text)
        if record is not None:
            self.records.append(record)

    def finish(self) -> None:
        """
        Called once the input is exhausted
        """

    @abstractmethod
    def parse_fields(self, text: str) -> Optional[T]:
        """
        :param text: line content without its line terminator
        :return: parsed record, or None if the line carries no record
        :raises MalformedLineError: if the line cannot be parsed
        """

    def _int(self, value: str, what: str) -> int:
        try:
            return int(value.strip())
        except ValueError:
            raise self.malformed(f"{what} is not an integer: {value!r}") from None


class RatingsLineParser(RecordParser[RatingRecord]):
    """
    Parses `user, item, rating[, timestamp]` records in tab-separated (tsv), comma-separated (csv) or
    MovieLens-1M (dat, "::"-separated) layout.  A csv file may start with a header row.
    """

    DELIMITERS = {"tsv": "\t", "csv": ",", "dat": "::"}

    def __init__(self, fmt: str = "tsv", source: str = "<input>") -> None:
        if fmt not in self.DELIMITERS:
            raise ValueError(f"unsupported ratings format {fmt!r}; expected one of {sorted(self.DELIMITERS)}")
        super().__init__(source)
        self._fmt = fmt
        self._delimiter = self.DELIMITERS[fmt]

    def parse_fields(self, text: str) -> Optional[RatingRecord]:
        fields = text.split(self._delimiter)
        if self._fmt == "csv" and not self.records and not fields[0].strip().lstrip("-").isdigit():
            log.debug("Skipping header row of %s: %s", self._source, text)
            return None
        if len(fields) < 3:
            raise self.malformed(f"expected at least 3 fields, found {len(fields)}")
        user = self._int(fields[0], "user")
        item = self._int(fields[1], "item")
        rating = self._int(fields[2], "rating")
        if not 1 <= rating <= 5:
            raise self.malformed(f"rating {rating} outside 1..5")
        timestamp = self._int(fields[3], "timestamp") if len(fields) > 3 and fields[3].strip() else 0
        return user, item, rating, timestamp


def split_title_year(title: str) -> Tuple[str, Optional[int]]:
    """
    :return: title with any trailing "(YYYY)" removed, and that year (or None)
    """
    match = _TITLE_YEAR.search(title)
    if match is None:
        return title.strip(), None
    return title[:match.start()].strip(), int(match.group(1))


class MovieLensItemParser(RecordParser[ItemRecord]):
    """
    ML-100K `u.item`: `id|title|release date|video release date|IMDb URL|<19 genre flags>`
    """

    def parse_fields(self, text: str) -> Optional[ItemRecord]:
        fields = text.split("|")
        if len(fields) < 5 + len(MOVIELENS_GENRES):
            raise self.malformed(f"expected {5 + len(MOVIELENS_GENRES)} fields, found {len(fields)}")
        flags = fields[-len(MOVIELENS_GENRES):]
        if any(flag.strip() not in ("0", "1") for flag in flags):
            raise self.malformed("genre flags must be 0 or 1")
        item_id = self._int(fields[0], "item")
        title, year = split_title_year(fields[1])
        release = fields[2].strip()
        if release[-4:].isdigit():
            year = int(release[-4:])
        genres = frozenset(genre for genre, flag in zip(MOVIELENS_GENRES, flags) if flag.strip() == "1")
        return ItemRecord(item_id, title, year, genres or frozenset({UNKNOWN_CATEGORY}))


class MovieLensDatParser(RecordParser[ItemRecord]):
    """
    ML-1M `movies.dat`: `id::Title (Year)::Genre|Genre`
    """

    def parse_fields(self, text: str) -> Optional[ItemRecord]:
        fields = text.split("::")
        if len(fields) != 3:
            raise self.malformed(f"expected 3 fields, found {len(fields)}")
        item_id = self._int(fields[0], "item")
        title, year = split_title_year(fields[1])
        return ItemRecord(item_id, title, year, _genre_set(fields[2]))


def _genre_set(text: str) -> FrozenSet[str]:
    genres = frozenset(g.strip() for g in text.split("|") if g.strip() and g.strip() != "(no genres listed)")
    return genres or frozenset({UNKNOWN_CATEGORY})


class GenreTsvParser(RecordParser[ItemRecord]):
    """
    Generic tab-separated item table.  The first line is a header naming the columns; the first column holds
    the item id, a column named "genres" holds "|"-separated labels and an optional "title" column the title.
    """

    def __init__(self, source: str = "<input>") -> None:
        super().__init__(source)
        self._columns: Optional[Sequence[str]] = None

    def parse_fields(self, text: str) -> Optional[ItemRecord]:
        fields = text.split("\t")
        if self._columns is None:
            columns = [c.strip().lower() for c in fields]
            if "genres" not in columns:
                raise MissingGenreHeaderError(self._source)
            self._columns = columns
            return None
        if len(fields) != len(self._columns):
            raise self.malformed(f"expected {len(self._columns)} fields, found {len(fields)}")
        row = dict(zip(self._columns, fields))
        item_id = self._int(fields[0], "item")
        title, year = split_title_year(row.get("title", ""))
        return ItemRecord(item_id, title, year, _genre_set(row["genres"]))

    def finish(self) -> None:
        if self._columns is None:
            raise MissingGenreHeaderError(self._source)


class UserProfileParser(RecordParser[Tuple[int, str]]):
    """
    Renders demographic records into one-sentence profile descriptions.

    movielens_user (ML-100K `u.user`): `id|age|gender|occupation|zip`
    movielens_users_dat (ML-1M `users.dat`): `id::gender::age code::occupation code::zip`
    """

    FORMATS = ("movielens_user", "movielens_users_dat")

    def __init__(self, fmt: str = "movielens_user", source: str = "<input>") -> None:
        if fmt not in self.FORMATS:
            raise ValueError(f"unsupported profile format {fmt!r}; expected one of {self.FORMATS}")
        super().__init__(source)
        self._fmt = fmt

    def parse_fields(self, text: str) -> Optional[Tuple[int, str]]:
        if self._fmt == "movielens_user":
            fields = text.split("|")
            if len(fields) != 5:
                raise self.malformed(f"expected 5 fields, found {len(fields)}")
            user_id = self._int(fields[0], "user")
            age = f"{self._int(fields[1], 'age')}-year-old"
            gender = _GENDERS.get(fields[2].strip().upper(), "person")
            occupation = fields[3].strip()
        else:
            fields = text.split("::")
            if len(fields) != 5:
                raise self.malformed(f"expected 5 fields, found {len(fields)}")
            user_id = self._int(fields[0], "user")
            gender = _GENDERS.get(fields[1].strip().upper(), "person")
            age_code = self._int(fields[2], "age")
            occupation_code = self._int(fields[3], "occupation")
            if age_code not in MOVIELENS_AGE_RANGES or not 0 <= occupation_code < len(MOVIELENS_OCCUPATIONS):
                raise self.malformed("unknown age or occupation code")
            age = f"aged {MOVIELENS_AGE_RANGES[age_code]}"
            occupation = MOVIELENS_OCCUPATIONS[occupation_code]
        zip_code = fields[4].strip()
        if self._fmt == "movielens_user":
            text = f"The user is a {age} {gender} whose occupation is {occupation}, zip code {zip_code}"
        else:
            text = f"The user is a {gender} {age} whose occupation is {occupation}, zip code {zip_code}"
        return user_id, text


def parse_file(path: str, parser: LineParser, encoding: str = "utf-8") -> None:
    """
    Feed every line of a file to a parser

    :param path: file to read
    :param parser: parser receiving the lines
    :param encoding: text encoding of the file

    :raises FileNotFoundError: if path does not point to a file
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding=encoding, newline="") as stream:
        for line in stream:
            parser.parse_line(line)
    if isinstance(parser, RecordParser):
        parser.finish()
