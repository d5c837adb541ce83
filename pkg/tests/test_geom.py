import math

import numpy as np
import pytest
from conftest import homog_abs, homog_rel, random_abs, random_rel

from egomotion.errors import InvalidPoseError, TrackFormatError
from egomotion.geom import (
    AbsolutePose, RelativePose, Trajectory, compose, euler_quat_roundtrip, euler_to_matrix, integrate,
    matrix_to_euler, pose_error, read_trajectory_csv, relative, so3_exp, so3_log, wrap_angle,
    write_trajectory_csv,
)


def assert_pose_close(a: AbsolutePose, b: AbsolutePose, tol=1e-9):
    assert np.allclose(a.t, b.t, atol=tol)
    # q and -q are the same rotation; both are canonical (w >= 0) but w ~ 0 can flip
    qa, qb = np.array(a.q), np.array(b.q)
    assert min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) < tol


def assert_rel_close(a: RelativePose, b: RelativePose, tol=1e-9):
    assert np.allclose(a.t, b.t, atol=tol)
    d = wrap_angle(np.array(a.r) - np.array(b.r))
    assert np.abs(d).max() < tol


# ---- compose -----------------------------------------------------------------

def test_compose_identity():
    T = RelativePose((1.0, 2.0, 3.0), (0.1, -0.2, 0.3))
    out = compose(AbsolutePose.identity(), T)
    assert np.allclose(out.t, T.t)
    assert np.allclose(out.rotation, euler_to_matrix(np.array(T.r)), atol=1e-12)


def test_compose_pure_translations_add():
    out = compose(AbsolutePose((1, 0, 0)), RelativePose((0, 1, 0)))
    assert np.allclose(out.t, (1, 1, 0))
    assert np.allclose(out.q, (1, 0, 0, 0))


def test_compose_yaw_quarter_turn_matches_matrix_oracle():
    a = AbsolutePose.from_euler((0, 0, 0), (0, 0, math.pi / 2))
    b = RelativePose((1, 0, 0))
    out = compose(a, b)
    oracle = homog_abs(a) @ homog_rel(b)
    assert np.allclose(out.t, (0, 1, 0), atol=1e-12)
    assert np.allclose(out.matrix(), oracle, atol=1e-12)
    assert pose_error(out, AbsolutePose.from_euler((0, 1, 0), (0, 0, math.pi / 2)))[1] < 1e-12


def test_compose_matches_matrix_oracle_random(rng):
    for _ in range(200):
        a, b = random_abs(rng), random_rel(rng)
        assert np.allclose(compose(a, b).matrix(), homog_abs(a) @ homog_rel(b), atol=1e-9)


def test_compose_rejects_non_finite():
    with pytest.raises(InvalidPoseError):
        RelativePose((np.nan, 0, 0))
    with pytest.raises(InvalidPoseError):
        AbsolutePose((0, 0, 0), (np.inf, 0, 0, 0))
    with pytest.raises(InvalidPoseError):
        compose(RelativePose(), RelativePose())


def test_compose_associativity_1000_cases(rng):
    # (a + b) + c == a + (b + c) where b + c is the composed relative motion
    for _ in range(1000):
        a, b, c = random_abs(rng), random_rel(rng), random_rel(rng)
        left = compose(compose(a, b), c)
        bc = relative(compose(compose(AbsolutePose.identity(), b), c), AbsolutePose.identity())
        assert_pose_close(left, compose(a, bc))


# ---- relative ----------------------------------------------------------------

def test_relative_self_is_identity(rng):
    a = random_abs(rng)
    assert_rel_close(relative(a, a), RelativePose())


def test_relative_roundtrip_1000_cases(rng):
    for _ in range(1000):
        a, d = random_abs(rng), random_rel(rng)
        assert_rel_close(relative(compose(a, d), a), d)


def test_relative_matches_inverse_oracle(rng):
    for _ in range(200):
        a, b = random_abs(rng), random_abs(rng)
        rel = relative(a, b)
        oracle = np.linalg.inv(homog_abs(b)) @ homog_abs(a)
        assert np.allclose(homog_rel(rel), oracle, atol=1e-9)
        assert_pose_close(compose(b, rel), a)


# ---- integrate ---------------------------------------------------------------

def test_integrate_straight():
    traj = integrate([RelativePose((1, 0, 0))] * 10)
    assert len(traj) == 11
    assert np.allclose(traj.t[-1], (10, 0, 0))


def test_integrate_empty_is_origin():
    origin = AbsolutePose((1, 2, 3), (0.5, 0.5, 0.5, 0.5))
    traj = integrate([], origin)
    assert len(traj) == 1
    assert_pose_close(traj[0], origin)


@pytest.mark.parametrize("n", [3, 7, 100, 1000])
def test_integrate_polygon_closes(n):
    step = RelativePose((2 * math.sin(math.pi / n), 0, 0), (0, 0, 2 * math.pi / n))
    traj = integrate([step] * n)
    assert np.linalg.norm(traj.t[-1]) < 1e-6
    assert pose_error(traj[-1], traj[0])[1] < 1e-6


def test_integrate_element_rule(rng):
    rels = [random_rel(rng) for _ in range(20)]
    origin = random_abs(rng)
    traj = integrate(rels, origin)
    assert_pose_close(traj[0], origin)
    for i in range(1, len(traj)):
        assert_pose_close(traj[i], compose(traj[i - 1], rels[i - 1]))


def test_integrate_reproduces_ground_truth(rng):
    poses = [random_abs(rng) for _ in range(50)]
    gt = Trajectory.from_poses(range(50), poses)
    traj = integrate(gt.relative_motions(), gt[0])
    for i in range(50):
        assert_pose_close(traj[i], gt[i])


def test_quaternion_norm_after_long_chain(rng):
    rels = [random_rel(rng) for _ in range(10_000)]
    traj = integrate(rels, random_abs(rng))
    assert np.abs(np.linalg.norm(traj.q, axis=1) - 1).max() < 1e-9
    p = AbsolutePose()
    for r in rels[:2000]:
        p = compose(p, r)
    assert abs(np.linalg.norm(p.q) - 1) < 1e-9


# ---- Euler / quaternion ------------------------------------------------------

def test_euler_zero_is_identity_quaternion():
    q, r = euler_quat_roundtrip((0, 0, 0))
    assert np.array_equal(q, [1, 0, 0, 0])
    assert np.allclose(r, 0)


def test_yaw_quarter_turn_quaternion():
    q, _ = euler_quat_roundtrip((0, 0, math.pi / 2))
    # axis-angle: (cos(a/2), sin(a/2) * axis) with axis z
    assert np.allclose(q, [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], atol=1e-15)


def test_euler_roundtrip_1000_cases(rng):
    for _ in range(1000):
        r = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 2 + 0.1, np.pi / 2 - 0.1),
                      rng.uniform(-np.pi, np.pi)])
        q, back = euler_quat_roundtrip(r)
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        assert np.abs(wrap_angle(back - r)).max() < 1e-9


def test_gimbal_lock_folds_roll_into_yaw():
    R = euler_to_matrix(np.array([0.3, math.pi / 2, 0.2]))
    r = matrix_to_euler(R)
    assert r[0] == 0.0
    assert np.allclose(euler_to_matrix(r), R, atol=1e-9)


def test_euler_stored_wrapped():
    r = RelativePose(r=(3 * math.pi, -math.pi, 0.5)).r
    assert all(-math.pi < v <= math.pi for v in r)
    assert math.isclose(r[0], math.pi) and math.isclose(r[1], math.pi)


def test_so3_exp_log_roundtrip(rng):
    v = rng.normal(size=(500, 3))
    v *= (rng.uniform(0, 3, 500) / np.linalg.norm(v, axis=1))[:, None]
    assert np.allclose(so3_log(so3_exp(v)), v, atol=1e-9)


# ---- pose_error --------------------------------------------------------------

def test_pose_error_identical():
    a = AbsolutePose((1, 2, 3))
    assert pose_error(a, a) == (0.0, 0.0)


def test_pose_error_pythagorean():
    assert pose_error(AbsolutePose((3, 4, 0)), AbsolutePose())[0] == pytest.approx(5.0)


def test_pose_error_rotation_oracle(rng):
    for _ in range(200):
        a, b = random_abs(rng), random_abs(rng)
        dot = abs(float(np.dot(a.q, b.q)))
        assert pose_error(a, b)[1] == pytest.approx(2 * math.acos(min(1.0, dot)), abs=1e-7)


# ---- trajectory container and CSV --------------------------------------------

def test_trajectory_requires_increasing_ids():
    with pytest.raises(InvalidPoseError):
        Trajectory([0, 0], np.zeros((2, 3)), [[1, 0, 0, 0]] * 2)


def test_trajectory_csv_roundtrip(tmp_path, rng):
    traj = integrate([random_rel(rng) for _ in range(30)], random_abs(rng), first_frame_id=5)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, traj)
    text = path.read_text()
    assert text.splitlines()[0] == "frame_id,tx,ty,tz,qw,qx,qy,qz"
    back = read_trajectory_csv(path)
    assert np.array_equal(back.frame_ids, traj.frame_ids)
    assert np.allclose(back.t, traj.t, rtol=1e-8, atol=1e-8)
    assert np.allclose(back.q, traj.q, rtol=1e-8, atol=1e-8)


def test_trajectory_csv_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(TrackFormatError):
        read_trajectory_csv(p)
