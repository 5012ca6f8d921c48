import xml.etree.ElementTree as ET

import pytest

from blobsurrogate import ConfigError, render_bar_plot, render_line_plot


def parse(svg_text):
    return ET.fromstring(svg_text)


class TestLinePlot:
    def series(self):
        return [("first", [0.0, 1.0, 2.0], [0.1, 0.5, 0.4]),
                ("second", [0.0, 1.0, 2.0], [0.9, 0.7, 0.2])]

    def test_valid_xml_with_one_polyline_per_series(self):
        svg = render_line_plot(self.series(), "t", "x", "y")
        root = parse(svg)
        assert root.tag.endswith("svg")
        polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
        assert len(polylines) == 2

    def test_labels_present(self):
        svg = render_line_plot(self.series(), "my title", "x-axis", "y-axis")
        assert "my title" in svg
        assert "x-axis" in svg and "y-axis" in svg
        assert "first" in svg and "second" in svg

    def test_deterministic_flag_drops_timestamp(self):
        a = render_line_plot(self.series(), "t", "x", "y", deterministic=True)
        b = render_line_plot(self.series(), "t", "x", "y", deterministic=True)
        assert a == b
        assert "generated" not in a

    def test_timestamp_present_by_default(self):
        assert "generated" in render_line_plot(self.series(), "t", "x", "y")

    def test_single_point_series_renders(self):
        svg = render_line_plot([("p", [1.0], [2.0])], "t", "x", "y")
        parse(svg)

    def test_empty_series_rejected(self):
        with pytest.raises(ConfigError):
            render_line_plot([], "t", "x", "y")
        with pytest.raises(ConfigError):
            render_line_plot([("a", [], [])], "t", "x", "y")

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ConfigError):
            render_line_plot([("a", [1.0, 2.0], [1.0])], "t", "x", "y")

    def test_non_finite_rejected(self):
        with pytest.raises(ConfigError):
            render_line_plot([("a", [1.0], [float("nan")])], "t", "x", "y")


class TestBarPlot:
    def test_valid_xml_with_one_rect_per_bar(self):
        svg = render_bar_plot(["a", "b", "c"], [1.0, 2.0, 0.5], "t", "y")
        root = parse(svg)
        rects = [el for el in root.iter() if el.tag.endswith("rect")
                 and el.get("fill") != "white"]  # skip the background
        assert len(rects) == 3

    def test_deterministic(self):
        a = render_bar_plot(["a"], [1.0], "t", "y", deterministic=True)
        b = render_bar_plot(["a"], [1.0], "t", "y", deterministic=True)
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            render_bar_plot([], [], "t", "y")

    def test_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            render_bar_plot(["a", "b"], [1.0], "t", "y")
