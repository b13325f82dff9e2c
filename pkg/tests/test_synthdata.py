import json

import numpy as np
import pytest

from alignlab.synthdata import (
    BACKGROUND_RGB,
    COLORS,
    SHAPES,
    Scene,
    SceneObject,
    ShardParseError,
    TOKEN_TO_ID,
    VOCAB,
    full_caption,
    generate_caption,
    generate_instruction_sample,
    generate_pair_shard,
    generate_instruction_shard,
    generate_scene,
    instruction_record,
    namespace_of,
    pair_record,
    read_shard,
    render_scene,
    write_shard,
)


def parse_caption_objects(caption):
    """Independent clause parser: each 'a <color> <shape> at row R column C'."""
    tokens = list(caption)
    objects = set()
    i = 0
    while i < len(tokens):
        assert tokens[i] == "a"
        color, shape = tokens[i + 1], tokens[i + 2]
        assert tokens[i + 3 : i + 5] == ["at", "row"]
        row = int(tokens[i + 5])
        assert tokens[i + 6] == "column"
        col = int(tokens[i + 7])
        objects.add((color, shape, row, col))
        i += 8
        if i < len(tokens):
            assert tokens[i] == "and"
            i += 1
    return objects


class TestGenerateScene:
    def test_full_grid_forced(self):
        scene = generate_scene(7, 4, 16)
        cells = {(o.row, o.col) for o in scene.objects}
        assert len(scene.objects) == 16
        assert cells == {(r, c) for r in range(4) for c in range(4)}

    def test_deterministic(self):
        assert generate_scene(7, 4, 4) == generate_scene(7, 4, 4)

    def test_distinct_cells_property(self):
        for seed in range(40):
            scene = generate_scene(seed, 4, 1 + seed % 16)
            cells = [(o.row, o.col) for o in scene.objects]
            assert len(set(cells)) == len(cells)
            assert all(0 <= o.row < 4 and 0 <= o.col < 4 for o in scene.objects)
            assert all(o.shape in SHAPES and o.color in COLORS for o in scene.objects)

    def test_capacity_exceeded(self):
        with pytest.raises(ValueError):
            generate_scene(7, 2, 5)
        with pytest.raises(ValueError):
            generate_scene(7, 4, 0)


class TestRenderScene:
    def test_empty_cells_are_background(self):
        scene = Scene(grid_size=4, seed=0, objects=(SceneObject("circle", "red", 0, 0),))
        img = render_scene(scene, 32)
        outside = img[8:, :, :]
        assert np.all(outside == np.array(BACKGROUND_RGB))

    def test_purity(self):
        scene = generate_scene(3, 4, 6)
        a, b = render_scene(scene, 32), render_scene(scene, 32)
        assert a.tobytes() == b.tobytes()

    def test_red_channel_confined_to_cell(self):
        # Pixel-scan oracle: background has zero red, so any red>0 pixel
        # must lie inside the red circle's 8x8 cell block.
        scene = Scene(grid_size=4, seed=0, objects=(SceneObject("circle", "red", 0, 0),))
        img = render_scene(scene, 32)
        red_rows, red_cols = np.nonzero(img[:, :, 0] > 0)
        assert len(red_rows) > 0
        assert red_rows.max() < 8 and red_cols.max() < 8
        assert np.all(img[:8, :8, 0][img[:8, :8, 0] > 0] == 1.0)

    def test_rejects_nondivisible_resolution(self):
        scene = generate_scene(1, 4, 2)
        with pytest.raises(ValueError):
            render_scene(scene, 30)

    def test_values_in_unit_range(self):
        img = render_scene(generate_scene(11, 4, 8), 32)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestGenerateCaption:
    def test_full_coverage_mentions_all(self):
        scene = generate_scene(5, 4, 4)
        pair = generate_caption(scene, 1.0, 9)
        mentioned = parse_caption_objects(pair.caption)
        expected = {(o.color, o.shape, o.row, o.col) for o in scene.objects}
        assert mentioned == expected

    def test_half_coverage_mentions_two(self):
        scene = generate_scene(5, 4, 4)
        pair = generate_caption(scene, 0.5, 9)
        assert len(parse_caption_objects(pair.caption)) == 2

    def test_nonintegral_coverage_rejected(self):
        scene = generate_scene(5, 4, 4)
        with pytest.raises(ValueError):
            generate_caption(scene, 0.3, 9)

    def test_coverage_ground_truth_property(self):
        # Counting distinct objects in the caption reproduces coverage * n.
        for seed in range(30):
            scene = generate_scene(seed, 4, 8)
            for coverage in (0.25, 0.5, 0.75, 1.0):
                pair = generate_caption(scene, coverage, seed + 1)
                mentioned = parse_caption_objects(pair.caption)
                assert len(mentioned) == int(coverage * 8)
                scene_objects = {(o.color, o.shape, o.row, o.col) for o in scene.objects}
                assert mentioned <= scene_objects

    def test_caption_tokens_in_vocab(self):
        scene = generate_scene(2, 4, 8)
        pair = generate_caption(scene, 1.0, 0)
        assert all(tok in TOKEN_TO_ID for tok in pair.caption)


class TestInstructionOracle:
    def oracle_answer(self, scene, sample):
        """Independent rule-based checker for stored answers."""
        kind = sample.task_kind
        instr = list(sample.instruction)
        if kind == "caption":
            return list(full_caption(scene))
        if kind == "region_query":
            row, col = int(instr[4]), int(instr[6])
            hit = [o for o in scene.objects if (o.row, o.col) == (row, col)]
            return [hit[0].color, hit[0].shape] if hit else ["nothing"]
        if kind == "count":
            color = next((t for t in instr if t in COLORS), None)
            shape = next((s for s in SHAPES if s in instr or s + "s" in instr), None)
            n = sum(
                1
                for o in scene.objects
                if (color is None or o.color == color) and (shape is None or o.shape == shape)
            )
            return list(str(n))
        color = next((t for t in instr if t in COLORS), None)
        shape = next((s for s in SHAPES if s in instr), None)
        present = any(
            (color is None or o.color == color) and (shape is None or o.shape == shape)
            for o in scene.objects
        )
        return ["yes"] if present else ["no"]

    def test_count_answer(self):
        scene = Scene(
            grid_size=4,
            seed=0,
            objects=(
                SceneObject("circle", "red", 0, 0),
                SceneObject("circle", "blue", 1, 1),
                SceneObject("circle", "red", 2, 2),
                SceneObject("square", "red", 3, 3),
            ),
        )
        assert scene.count_matching(shape="circle") == 3
        assert scene.count_matching(color="red", shape="circle") == 2

    def test_existence_absent(self):
        scene = Scene(grid_size=4, seed=0, objects=(SceneObject("circle", "red", 0, 0),))
        assert scene.count_matching(color="blue", shape="square") == 0

    def test_region_query_empty_cell(self):
        scene = Scene(grid_size=4, seed=0, objects=(SceneObject("circle", "red", 0, 0),))
        assert scene.object_at(3, 3) is None

    def test_all_task_kinds_verified_by_oracle(self):
        for seed in range(60):
            scene = generate_scene(seed, 4, 2 + seed % 7)
            for kind in ("caption", "region_query", "count", "existence"):
                sample = generate_instruction_sample(scene, kind, seed + 100)
                assert list(sample.answer) == self.oracle_answer(scene, sample), (
                    kind,
                    sample.instruction,
                    sample.answer,
                )
                assert all(tok in TOKEN_TO_ID for tok in sample.instruction)
                assert all(tok in TOKEN_TO_ID for tok in sample.answer)

    def test_empty_scene_rejected(self):
        scene = Scene(grid_size=4, seed=0, objects=())
        with pytest.raises(ValueError):
            generate_instruction_sample(scene, "count", 0)

    def test_unknown_task_rejected(self):
        scene = generate_scene(0, 4, 2)
        with pytest.raises(ValueError):
            generate_instruction_sample(scene, "segmentation", 0)


class TestShardIO:
    def test_round_trip(self, tmp_path):
        records = generate_pair_shard(3, 100)
        path = tmp_path / "shard.jsonl"
        write_shard(records, path)
        assert read_shard(path) == records

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_shard(path) == []

    def test_truncated_line_reports_index(self, tmp_path):
        records = generate_pair_shard(3, 3)
        path = tmp_path / "bad.jsonl"
        lines = [json.dumps(r) for r in records]
        lines[2] = lines[2][:25]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ShardParseError) as err:
            read_shard(path)
        assert err.value.line == 3
        assert "line 3" in str(err.value)

    def test_byte_equal_across_processes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_shard(generate_pair_shard(9, 50), a)
        write_shard(generate_pair_shard(9, 50), b)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_keys_preserved(self, tmp_path):
        records = generate_pair_shard(3, 2)
        records[0]["extra_annotation"] = {"source": "elsewhere"}
        path = tmp_path / "extra.jsonl"
        write_shard(records, path)
        assert read_shard(path)[0]["extra_annotation"] == {"source": "elsewhere"}

    def test_schema_fields(self):
        rec = generate_pair_shard(1, 1)[0]
        assert set(rec) == {
            "id", "scene", "caption", "coverage", "task_kind",
            "instruction", "answer", "score", "level",
        }
        assert rec["task_kind"] is None and rec["score"] is None

    def test_instruction_shard_fields(self):
        rec = generate_instruction_shard(1, 4)[2]
        assert rec["task_kind"] in ("caption", "region_query", "count", "existence")
        assert rec["instruction"] and rec["answer"]
        assert namespace_of(rec["id"]) == "train-1"


def test_vocab_has_no_duplicates():
    assert len(VOCAB) == len(set(VOCAB))
