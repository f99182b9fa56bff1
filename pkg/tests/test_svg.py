import xml.etree.ElementTree as ET

import numpy as np

from mvparticles.svg import Series, line_chart

NS = "{http://www.w3.org/2000/svg}"


def test_chart_is_valid_xml_with_one_polyline_per_series():
    text = line_chart([Series("a", [0, 1, 2], [1, 2, 3]), Series("b", [0, 1], [3, 0], markers=True)], title="t<1>")
    root = ET.fromstring(text.encode())
    assert root.tag == NS + "svg"
    assert len(root.findall(NS + "polyline")) == 2
    assert len(root.findall(NS + "circle")) == 2
    assert any(t.text == "t<1>" for t in root.iter(NS + "text"))


def test_non_finite_points_split_lines():
    text = line_chart([Series("", [0, 1, 2, 3, 4], [1, 2, np.nan, 3, 4])])
    root = ET.fromstring(text.encode())
    assert len(root.findall(NS + "polyline")) == 2
    # unlabeled series get no legend entry
    assert not any(t.text == "" for t in root.iter(NS + "text"))


def test_output_is_deterministic_and_handles_degenerate_input():
    s = [Series("x", np.linspace(0, 1, 50), np.exp(-np.linspace(0, 1, 50)))]
    assert line_chart(s) == line_chart(s)
    ET.fromstring(line_chart([Series("flat", [0, 1], [2, 2])]).encode())
    ET.fromstring(line_chart([Series("none", [0, 1], [np.nan, np.inf])]).encode())
