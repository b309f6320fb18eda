import numpy as np
import pytest

from sscinv.dynamics import TrajectoryRecord
from sscinv.grid import build_simulation_grid, sample_sdf, sphere_sdf
from sscinv.observation import (
    DepthCamera,
    ObservationFormatError,
    ObservationFrame,
    ObservationSequence,
    extract_surface_samples,
    generate_observations,
    hemisphere_camera,
    read_observations,
    render_depth_frame,
    write_observations,
)


def _still(grid, T):
    z = np.zeros((T + 1, grid.n_nodes, 3))
    return TrajectoryRecord(z, z.copy(), None, None, None, None, None, np.zeros((T + 1, 0)))


def _center(grid):
    return grid.rest_positions.mean(axis=0)


def _top_camera(grid, **kw):
    c = _center(grid)
    return DepthCamera(position=c + [0.0, 0.0, 20.0], look_at=c, **kw)


def test_samples_lie_on_zero_set(ball_grid):
    s = extract_surface_samples(ball_grid)
    assert len(s) > len(ball_grid.boundary_cells)
    assert np.abs(sample_sdf(ball_grid.sdf, s.rest)).max() < 0.05 * ball_grid.h


def test_rest_pose_points_on_surface(ball_grid):
    seq = generate_observations(ball_grid, _still(ball_grid, 2), _top_camera(ball_grid))
    pts = seq.frames[0].points
    assert len(pts) > 50
    assert np.abs(sample_sdf(ball_grid.sdf, pts)).max() < 0.05 * ball_grid.h
    # only the side facing the camera is seen
    assert np.all(pts[:, 2] > _center(ball_grid)[2] - 0.5 * ball_grid.h)


def test_at_most_one_point_per_pixel(ball_grid):
    cam = _top_camera(ball_grid, resolution=(8, 6))
    seq = generate_observations(ball_grid, _still(ball_grid, 3), cam)
    for fr in seq.frames:
        assert 0 < len(fr.points) <= 48
        col, row, _, ok = cam.project(fr.points)
        assert ok.all()
        assert len(set(zip(col, row))) == len(fr.points)


def test_noise_is_along_rays_with_requested_sigma():
    ball_grid = build_simulation_grid(sphere_sdf(6.0))
    sigma = 0.3
    samples = extract_surface_samples(ball_grid)
    u = np.zeros((ball_grid.n_nodes, 3))
    clean_cam = _top_camera(ball_grid, resolution=(200, 200), fov=np.deg2rad(30))
    noisy_cam = _top_camera(ball_grid, resolution=(200, 200), fov=np.deg2rad(30), noise_sigma=sigma)
    offsets = []
    for seed in range(4):
        clean = render_depth_frame(ball_grid, samples, u, clean_cam, seed)
        noisy = render_depth_frame(ball_grid, samples, u, noisy_cam, seed)
        ray = clean - clean_cam.position
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        d = noisy - clean
        along = np.sum(d * ray, axis=1)
        assert np.allclose(d, along[:, None] * ray, atol=1e-12)
        offsets.append(along)
    offsets = np.concatenate(offsets)
    assert len(offsets) >= 1000
    assert abs(offsets.std() - sigma) < 0.15 * sigma
    assert abs(offsets.mean()) < 4 * sigma / np.sqrt(len(offsets))


def test_camera_looking_away_sees_nothing(ball_grid):
    c = _center(ball_grid)
    cam = DepthCamera(position=c + [0, 0, 20.0], look_at=c + [0, 0, 40.0])
    seq = generate_observations(ball_grid, _still(ball_grid, 4), cam, every_nth=2)
    assert seq.timesteps == [2, 4]
    assert seq.n_points == 0


def test_every_nth_frame_schedule(ball_grid):
    seq = generate_observations(ball_grid, _still(ball_grid, 70), _top_camera(ball_grid, resolution=(4, 4)), every_nth=10)
    assert seq.timesteps == [10, 20, 30, 40, 50, 60, 70]
    with pytest.raises(ValueError):
        generate_observations(ball_grid, _still(ball_grid, 5), _top_camera(ball_grid), every_nth=0)


def test_seeded_frames_reproducible(ball_grid):
    cam = _top_camera(ball_grid, noise_sigma=0.2)
    a = generate_observations(ball_grid, _still(ball_grid, 4), cam, seed=3)
    b = generate_observations(ball_grid, _still(ball_grid, 4), cam, seed=3)
    c = generate_observations(ball_grid, _still(ball_grid, 4), cam, seed=4)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.frames, b.frames))
    assert not np.array_equal(a.frames[0].points, c.frames[0].points)
    # frame 2 does not depend on how many frames come before it
    d = generate_observations(ball_grid, _still(ball_grid, 4), cam, seed=3, every_nth=2)
    assert np.array_equal(d.frames[0].points, a.frames[1].points)


def test_hemisphere_camera_above_center(rng):
    for _ in range(20):
        cam = hemisphere_camera([1.0, 2.0, 3.0], 10.0, rng)
        assert cam.position[2] > 3.0
        assert np.isclose(np.linalg.norm(cam.position - [1.0, 2.0, 3.0]), 10.0)


def test_camera_dict_round_trip():
    cam = DepthCamera(position=(1, 2, 3), look_at=(0, 0, 0), resolution=(10, 20), noise_sigma=0.5)
    back = DepthCamera.from_dict(cam.to_dict())
    assert np.allclose(back.position, cam.position)
    assert back.resolution == (10, 20) and np.isclose(back.fov, cam.fov)
    with pytest.raises(ValueError):
        DepthCamera.from_dict({"pos": [0, 0, 1]})


def test_file_round_trip(tmp_path, rng):
    seq = ObservationSequence([
        ObservationFrame(3, rng.normal(size=(5, 3)), rng.uniform(0.5, 2, 5)),
        ObservationFrame(7, np.zeros((0, 3)), None),
        ObservationFrame(9, rng.normal(size=(2, 3)), None),
    ])
    p = tmp_path / "obs.txt"
    write_observations(seq, p)
    back = read_observations(p)
    assert back.timesteps == [3, 7, 9]
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)


def test_weight_column_optional(tmp_path):
    p = tmp_path / "obs.txt"
    p.write_text("# comment\n1\n5 2\n0 0 0\n1 2 3 0.5\n")
    fr = read_observations(p).frames[0]
    assert fr.t == 5 and np.array_equal(fr.weights, [1.0, 0.5])


@pytest.mark.parametrize(
    "text",
    [
        "",
        "x\n",
        "1\n5\n",
        "1\n5 2\n0 0 0\n",
        "1\n5 1\n0 0\n",
        "1\n5 1\n0 0 a\n",
        "1\n5 1\n0 0 0 -1\n",
        "2\n5 0\n5 0\n",
        "1\n5 0\n1 2 3\n",
    ],
)
def test_malformed_files_rejected(tmp_path, text):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(ObservationFormatError):
        read_observations(p)
