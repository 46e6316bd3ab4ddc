import os

import pytest

from ragforget.parsing import (
    GenreTsvParser,
    ItemRecord,
    MalformedLineError,
    MissingGenreHeaderError,
    MovieLensDatParser,
    MovieLensItemParser,
    RatingsLineParser,
    UserProfileParser,
    parse_file,
    split_title_year,
)

from .support import write_lines

TOY_STORY = "1|Toy Story (1995)|01-Jan-1995||http://us.imdb.com/M/title-exact?Toy%20Story%20(1995)|" \
            + "|".join(["0", "0", "0", "1", "1", "1"] + ["0"] * 13)


class TestRatingsLineParser:

    def test_tsv_records(self):
        parser = RatingsLineParser("tsv")
        parser.parse_line("196\t242\t3\t881250949\n")
        parser.parse_line("\n")
        parser.parse_line("186\t302\t3\n")
        assert parser.records == [(196, 242, 3, 881250949), (186, 302, 3, 0)]

    def test_csv_header_is_skipped(self):
        parser = RatingsLineParser("csv")
        parser.parse_line("userId,movieId,rating,timestamp")
        parser.parse_line("1,31,2,1260759144")
        assert parser.records == [(1, 31, 2, 1260759144)]

    def test_dat_layout(self):
        parser = RatingsLineParser("dat")
        parser.parse_line("1::1193::5::978300760")
        assert parser.records == [(1, 1193, 5, 978300760)]

    def test_rating_out_of_range_reports_line(self):
        parser = RatingsLineParser("tsv", source="u.data")
        parser.parse_line("1\t2\t3\t4")
        with pytest.raises(MalformedLineError) as e:
            parser.parse_line("1\t2\t6\t0")
        assert e.value.line_no == 2
        assert e.value.source == "u.data"

    def test_too_few_fields(self):
        with pytest.raises(MalformedLineError):
            RatingsLineParser("tsv").parse_line("1\t2")

    def test_non_integer_field(self):
        with pytest.raises(MalformedLineError):
            RatingsLineParser("tsv").parse_line("1\tx\t3")

    def test_unsupported_format(self):
        with pytest.raises(ValueError):
            RatingsLineParser("json")


class TestItemParsers:

    def test_movielens_item(self):
        parser = MovieLensItemParser()
        parser.parse_line(TOY_STORY)
        assert parser.records == [ItemRecord(1, "Toy Story", 1995, frozenset({"Animation", "Children's", "Comedy"}))]

    def test_movielens_item_without_genre_is_unknown(self):
        parser = MovieLensItemParser()
        parser.parse_line("267|unknown||||" + "|".join(["0"] * 19))
        record = parser.records[0]
        assert record.categories == frozenset({"unknown"})
        assert record.year is None

    def test_movielens_item_field_count(self):
        with pytest.raises(MalformedLineError):
            MovieLensItemParser().parse_line("1|Toy Story (1995)|01-Jan-1995")

    def test_movielens_dat(self):
        parser = MovieLensDatParser()
        parser.parse_line("1::Toy Story (1995)::Animation|Children's|Comedy")
        parser.parse_line("2::Nothing::(no genres listed)")
        assert parser.records == [
            ItemRecord(1, "Toy Story", 1995, frozenset({"Animation", "Children's", "Comedy"})),
            ItemRecord(2, "Nothing", None, frozenset({"unknown"})),
        ]

    def test_genre_tsv(self):
        parser = GenreTsvParser()
        parser.parse_line("item_id\ttitle\tgenres")
        parser.parse_line("10\tHeat (1995)\tAction|Crime")
        assert parser.records == [ItemRecord(10, "Heat", 1995, frozenset({"Action", "Crime"}))]

    def test_genre_tsv_requires_genre_column(self):
        with pytest.raises(MissingGenreHeaderError):
            GenreTsvParser().parse_line("item_id\ttitle")

    def test_genre_tsv_empty_file(self, tmp_path):
        path = write_lines(os.path.join(str(tmp_path), "items.tsv"), [])
        with pytest.raises(MissingGenreHeaderError):
            parse_file(path, GenreTsvParser(path))


class TestUserProfileParser:

    def test_movielens_user(self):
        parser = UserProfileParser("movielens_user")
        parser.parse_line("1|24|M|technician|85711")
        assert parser.records == [(1, "The user is a 24-year-old male whose occupation is technician, zip code 85711")]

    def test_movielens_users_dat(self):
        parser = UserProfileParser("movielens_users_dat")
        parser.parse_line("1::F::1::10::48067")
        assert parser.records == [
            (1, "The user is a female aged under 18 whose occupation is K-12 student, zip code 48067")]

    def test_unknown_codes(self):
        with pytest.raises(MalformedLineError):
            UserProfileParser("movielens_users_dat").parse_line("1::F::2::10::48067")


class TestParseFile:

    def test_split_title_year(self):
        assert split_title_year("Heat (1995)") == ("Heat", 1995)
        assert split_title_year("Heat") == ("Heat", None)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_file(os.path.join(str(tmp_path), "absent.tsv"), RatingsLineParser())

    def test_feeds_every_line(self, tmp_path):
        path = write_lines(os.path.join(str(tmp_path), "u.data"), ["1\t2\t3\t4", "", "5\t6\t1\t7"])
        parser = RatingsLineParser("tsv", path)
        parse_file(path, parser)
        assert parser.records == [(1, 2, 3, 4), (5, 6, 1, 7)]
        assert parser.line_no == 3
