"""Smoke test for the grit_toolkit extension module.

Build and run:
    cargo build --release -p grit-py --features extension-module
    cp target/release/libgrit_toolkit.so crates/python/python/grit_toolkit.so
    python3 crates/python/python/smoke_test.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import grit_toolkit as gt

CAMPFIRE = (
    "<s> <image> </image> <grounding> <p> It </p><box><loc_44><loc_863></box> seats next to "
    "<p> a campfire </p><box><loc_4><loc_1007></box> </s>"
)

PARSE = {
    "image_id": "flowers",
    "width": 224,
    "height": 224,
    "caption": "a dog in a field of flowers",
    "tokens": [
        {"text": "a", "head": 1, "dep": "det"},
        {"text": "dog", "head": 1, "dep": "ROOT"},
        {"text": "in", "head": 1, "dep": "prep"},
        {"text": "a", "head": 4, "dep": "det"},
        {"text": "field", "head": 2, "dep": "pobj"},
        {"text": "of", "head": 4, "dep": "prep"},
        {"text": "flowers", "head": 5, "dep": "pobj"},
    ],
    "chunks": [{"start": 0, "end": 2, "head": 1}, {"start": 3, "end": 5, "head": 4}, {"start": 6, "end": 7, "head": 6}],
}
DETS = {
    "image_id": "flowers",
    "detections": [
        {"chunk_index": 0, "box": [20, 60, 120, 200], "score": 0.9},
        {"chunk_index": 1, "box": [0, 120, 224, 224], "score": 0.8},
    ],
}


def main():
    assert gt.NUM_LOCATION_TOKENS == 1024
    assert gt.quantize((10, 10, 100, 200), 224, 224) == (33, 910)
    assert gt.dequantize(33, 910, 224, 224) == (10.5, 10.5, 101.5, 199.5)
    assert abs(gt.iou((0, 0, 10, 10), (5, 5, 15, 15)) - 25 / 175) < 1e-12
    assert gt.nms([(0, 0, 10, 10), (0, 0, 10, 10)], [0.9, 0.8]) == [0]

    doc = gt.parse(CAMPFIRE)
    assert [link[3] for link in doc.links] == [[(44, 863)], [(4, 1007)]]
    assert doc.serialize() == CAMPFIRE
    assert gt.GroundedCaption.from_json(doc.to_json()) == doc
    built = gt.GroundedCaption("a dog", [(0, 5, [(0, 33)])], grounding=True)
    assert built.serialize() == "<grounding> <p> a dog </p><box><loc_0><loc_33></box>"
    try:
        gt.parse("<p> a dog </p><box><loc_1></box>")
    except gt.DecodeError:
        pass
    else:
        raise AssertionError("malformed box group parsed")
    links, failed = gt.extract_links("<p> a </p><box><loc_1><loc_2></box><box><loc_1></box>")
    assert failed and links == [("a", [(1, 2)])]

    record = gt.build_record(json.dumps(PARSE), json.dumps(DETS))
    assert [r["text"] for r in record["refs"]] == ["a dog in a field of flowers"]
    assert record["grounded_text"].endswith("<box><loc_258><loc_913></box>")
    low = dict(DETS, detections=[dict(DETS["detections"][0], score=0.65)])
    assert gt.build_record(json.dumps(PARSE), json.dumps(low)) is None

    with tempfile.TemporaryDirectory() as tmp:
        paths = {name: os.path.join(tmp, name) for name in ["p", "d", "o", "r", "g", "q"]}
        with open(paths["p"], "w") as f:
            f.write(json.dumps(PARSE) + "\n")
        with open(paths["d"], "w") as f:
            f.write(json.dumps(DETS) + "\n")
        summary = gt.build_corpus(paths["p"], paths["d"], paths["o"], paths["r"])
        assert (summary["written"], summary["rejected"]) == (1, 0)

        with open(paths["g"], "w") as f:
            f.write(json.dumps({"id": "a", "phrase": "a dog", "width": 224, "height": 224, "gold_boxes": [[20, 60, 120, 200]]}) + "\n")
        with open(paths["q"], "w") as f:
            f.write(json.dumps({"id": "a", "output": "<p> a dog </p><box><loc_258><loc_913></box>"}) + "\n")
        report = gt.score_run(paths["g"], paths["q"])
        assert report["recall_at"] == {1: 1.0, 5: 1.0, 10: 1.0} and report["accuracy"] == 1.0

        with open(paths["o"]) as f:
            line = f.readline()
        pairs = gt.instruction_examples(line, seed=7)
        assert pairs[0] == ("<p> a dog in a field of flowers </p>", "<box><loc_258><loc_913></box>")
        assert pairs == gt.instruction_examples(line, seed=7)

    assert gt.rec_prompt("a dog") == "<s> <image> </image> <grounding> <p> a dog </p>"
    assert gt.reg_prompt(44, 863).endswith("<p> It </p><box><loc_44><loc_863></box> is")
    assert gt.phrase_grounding_prompt("a dog on grass", 9, 14).endswith("a dog on <p> grass </p>")
    print("grit_toolkit smoke test passed")


if __name__ == "__main__":
    main()
