import numpy as np
import pytest

from fsail.env import (VOCAB, Catalog, EnvParams, ExpertError, GenerationError, KeyframeAction,
                       Obj, TaskSpec, WorldState, check_success, default_catalog, expert_policy,
                       expert_rollout, generate_demos, read_demo_set, render_views, replay, reset,
                       step, tokenize, validate_catalog, write_demo_set)
from fsail.env.demos import DemoError, read_manifest
from fsail.env.render import N_PLANES, P_OCC, P_GRIP, render_codes
from fsail.env.tasks import TaskError, TokenizeError
from fsail.env.world import Gripper

CATALOG = default_catalog()
ALL_TASKS = CATALOG.all()
BY_ID = {t.task_id: t for t in ALL_TASKS}


def empty_state(*objs, gripper=Gripper(0, 0, 2, 0, False), held=None):
    return WorldState(12, tuple(objs), gripper, held)


class TestCatalog:
    def test_counts(self):
        assert len(CATALOG.base) == 10 and len(CATALOG.incremental) == 5

    def test_incremental_pairs_disjoint_from_base(self):
        base_pairs = {(t.verb, t.obj) for t in CATALOG.base}
        assert not any((t.verb, t.obj) in base_pairs for t in CATALOG.incremental)

    def test_each_incremental_task_brings_something_new(self):
        verbs = {t.verb for t in CATALOG.base}
        objs = {t.obj for t in CATALOG.base}
        for t in CATALOG.incremental:
            assert t.verb not in verbs or t.obj not in objs

    def test_validation_rejects_reused_pair(self):
        bad = TaskSpec("again", "reach", ("cube", "red"), None, "incremental")
        with pytest.raises(TaskError):
            validate_catalog(CATALOG.base, [bad])

    def test_invalid_object_for_verb(self):
        with pytest.raises(TaskError):
            TaskSpec("x", "press", ("cube", "red"))

    def test_round_trip(self, tmp_path):
        CATALOG.save(tmp_path / "catalog.json")
        back = Catalog.load(tmp_path / "catalog.json")
        assert [t.task_id for t in back.all()] == [t.task_id for t in ALL_TASKS]
        assert back.all() == ALL_TASKS

    def test_vocabulary_size(self):
        assert 30 <= len(VOCAB) <= 45


class TestTokenize:
    def test_padded_to_m(self):
        ids = tokenize("reach the red cube", 8)
        assert len(ids) == 8 and ids[4:] == [0, 0, 0, 0]

    def test_every_instruction_fits(self):
        for t in ALL_TASKS:
            assert len(tokenize(t.instruction())) == 8

    def test_instructions_are_distinct(self):
        assert len({tuple(tokenize(t.instruction())) for t in ALL_TASKS}) == len(ALL_TASKS)

    def test_unknown_word(self):
        with pytest.raises(TokenizeError):
            tokenize("reach the orange cube")

    def test_too_long(self):
        with pytest.raises(TokenizeError):
            tokenize(" ".join(["the"] * 9))


class TestReset:
    def test_deterministic(self):
        for t in ALL_TASKS:
            assert reset(t, 5) == reset(t, 5)

    def test_seeds_vary_layout(self):
        t = BY_ID["pick_place_red_cube_green_zone"]
        cells = [reset(t, s).find(t.obj).cell for s in range(100)]
        first = cells[0]
        assert sum(c != first for c in cells) / 99 > 0.9

    def test_reach_has_one_target_object(self):
        t = BY_ID["reach_red_cube"]
        for s in range(20):
            assert sum(1 for o in reset(t, s).objects if (o.shape, o.color) == t.obj) == 1

    def test_starts_unsolved(self):
        for t in ALL_TASKS:
            for s in range(30):
                assert not check_success(reset(t, s), t)

    def test_no_overlaps(self):
        for t in ALL_TASKS:
            for s in range(30):
                st = reset(t, s)
                cells = [(o.x, o.y, o.level) for o in st.objects]
                assert len(cells) == len(set(cells))

    def test_unplaceable_task_raises(self):
        t = BY_ID["pick_place_red_cube_green_zone"]
        with pytest.raises(GenerationError):
            reset(t, 0, grid=2, n_distractors=3)


class TestRender:
    def test_empty_table(self):
        views = render_views(empty_state())
        assert views.shape == (3, 16, 16, N_PLANES)
        assert not views[..., P_OCC].any()

    def test_single_object_projects_to_one_cell_per_view(self):
        st = empty_state(Obj(0, "cube", "red", 3, 4, 0))
        views = render_views(st)
        for v in range(3):
            assert int((views[v, ..., P_OCC] > 0).sum()) == 1
        assert views[0, 4 + 2, 3 + 2, P_OCC] > 0  # top: (row=y, col=x)
        assert views[1, 0 + 2, 3 + 2, P_OCC] > 0  # front: (row=level, col=x)
        assert views[2, 0 + 2, 4 + 2, P_OCC] > 0  # side: (row=level, col=y)

    def test_pure(self):
        st = reset(ALL_TASKS[1], 3)
        assert render_codes(st).tobytes() == render_codes(st).tobytes()

    def test_top_view_counts_columns(self):
        for t in ALL_TASKS:
            st = reset(t, 7)
            columns = {o.cell for o in st.objects}
            assert int((render_codes(st)[0, ..., P_OCC] > 0).sum()) == len(columns)

    def test_gripper_visible_in_every_view(self):
        views = render_views(empty_state(gripper=Gripper(5, 6, 1, 0, False)))
        for v in range(3):
            assert int((views[v, ..., P_GRIP] > 0).sum()) == 1


class TestStep:
    def test_open_without_move_only_counts(self):
        st = empty_state(Obj(0, "cube", "red", 3, 4, 0))
        nxt = step(st, KeyframeAction(0, 0, 2, 0, 0))
        assert nxt.objects == st.objects and nxt.gripper == st.gripper
        assert nxt.step_count == st.step_count + 1

    def test_grasp(self):
        st = empty_state(Obj(0, "cube", "red", 3, 4, 0))
        nxt = step(st, KeyframeAction(3, 4, 0, 0, 1))
        assert nxt.held == 0 and nxt.gripper.closed

    def test_grasp_move_release_relocates(self):
        st = empty_state(Obj(0, "cube", "red", 3, 4, 0))
        for a in [(3, 4, 0, 0, 1), (8, 9, 1, 0, 1), (8, 9, 1, 0, 0)]:
            st = step(st, KeyframeAction(*a))
        o = st.objects[0]
        assert (o.x, o.y, o.level) == (8, 9, 0) and st.held is None

    def test_grasp_on_empty_cell_is_noop(self):
        st = empty_state(Obj(0, "cube", "red", 3, 4, 0))
        nxt = step(st, KeyframeAction(5, 5, 0, 0, 1))
        assert nxt.held is None and nxt.objects == st.objects

    def test_out_of_range_action(self):
        with pytest.raises(ValueError):
            step(empty_state(), KeyframeAction(12, 0, 0, 0, 0))

    def test_press_button(self):
        st = empty_state(Obj(0, "button", "red", 2, 2, 0))
        st = step(st, KeyframeAction(2, 2, 0, 0, 1))
        assert st.objects[0].state == 1

    def test_release_stacks_on_top(self):
        st = empty_state(Obj(0, "cube", "green", 1, 1, 0), Obj(1, "cube", "blue", 6, 6, 0))
        for a in [(1, 1, 0, 0, 1), (6, 6, 1, 0, 1), (6, 6, 1, 0, 0)]:
            st = step(st, KeyframeAction(*a))
        assert st.objects[0].level == 1
        assert check_success(st, BY_ID["stack_green_cube_blue_cube"])


class TestSuccess:
    def test_pick_place_one_cell_off_fails(self):
        t = BY_ID["pick_place_red_cube_green_zone"]
        near = empty_state(Obj(0, "cube", "red", 4, 5, 0), Obj(1, "zone", "green", 5, 5, 0))
        on = empty_state(Obj(0, "cube", "red", 5, 5, 0), Obj(1, "zone", "green", 5, 5, 0))
        assert not check_success(near, t)
        assert check_success(on, t)

    def test_missing_object_is_failure(self):
        assert not check_success(empty_state(), BY_ID["reach_red_cube"])


class TestExpert:
    def test_reach_targets_object_open(self):
        t = BY_ID["reach_red_cube"]
        st = reset(t, 0)
        a = expert_policy(st, t)
        assert (a.x_bin, a.y_bin) == st.find(t.obj).cell and a.gripper == 0

    @pytest.mark.parametrize("task_id", sorted(BY_ID))
    def test_always_succeeds(self, task_id):
        t = BY_ID[task_id]
        for s in range(200):
            d = expert_rollout(t, s)
            assert 1 <= len(d.steps) <= 6

    def test_pick_place_within_six(self):
        t = BY_ID["pick_place_red_cube_green_zone"]
        assert all(len(expert_rollout(t, s).steps) <= 6 for s in range(100))

    def test_solved_state_gives_noop(self):
        t = BY_ID["press_red_button"]
        st = reset(t, 0)
        for a in expert_rollout(t, 0).actions:
            st = step(st, a)
        hold = expert_policy(st, t)
        after = step(st, hold)
        assert after.objects == st.objects and after.gripper == st.gripper

    def test_unsolvable_raises(self):
        t = BY_ID["pick_place_red_cube_green_zone"]
        with pytest.raises(ExpertError):
            expert_policy(empty_state(), t)


class TestDemos:
    def test_seeds_are_consecutive(self):
        demos = generate_demos(ALL_TASKS[0], 3, 40)
        assert [d.seed for d in demos] == [40, 41, 42]

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            generate_demos(ALL_TASKS[0], 0, 0)

    def test_replay_reproduces_observations(self):
        for t in ALL_TASKS:
            d = expert_rollout(t, 9)
            r = replay(t, d.seed, d.instruction_tokens, d.actions)
            for (o1, a1), (o2, a2) in zip(d.steps, r.steps):
                assert o1.codes.tobytes() == o2.codes.tobytes() and a1 == a2

    def test_replay_of_wrong_actions_fails(self):
        t = BY_ID["press_red_button"]
        with pytest.raises(DemoError):
            replay(t, 0, tokenize(t.instruction()), [KeyframeAction(0, 0, 2, 0, 0)])

    def test_storage_round_trip(self, tmp_path):
        demos = [d for t in ALL_TASKS[:3] for d in generate_demos(t, 2, 0)]
        write_demo_set(tmp_path, CATALOG, EnvParams(), demos)
        _, params, manifest, back = read_demo_set(tmp_path)
        assert params == EnvParams()
        assert manifest["format"] == "fsail-demos"
        assert len(back) == len(demos)
        for a, b in zip(demos, back):
            assert a.to_record() == b.to_record()
            assert all(x.codes.tobytes() == y.codes.tobytes()
                       for (x, _), (y, _) in zip(a.steps, b.steps))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DemoError):
            read_manifest(tmp_path)
