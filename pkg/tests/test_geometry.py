import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from armsight import geometry as G


def rand_transform(rng):
    rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()
    return G.RigidTransform(rot, rng.normal(size=3))


def rand_chain(rng, n):
    joints = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        joints.append(G.JointSpec(axis, rand_transform(rng), radius=0.05))
    return G.KinematicChain(tuple(joints))


def fk_oracle(chain, angles):
    """Independent FK: compose 4x4 homogeneous matrices built via scipy rotations."""
    T = np.eye(4)
    out = [T[:3, 3].copy()]
    for joint, theta in zip(chain.joints, angles):
        spin = np.eye(4)
        spin[:3, :3] = Rotation.from_rotvec(np.asarray(joint.axis) * theta).as_matrix()
        off = np.eye(4)
        off[:3, :3] = joint.offset.rotation
        off[:3, 3] = joint.offset.translation
        T = T @ spin @ off
        out.append(T[:3, 3].copy())
    return np.array(out)


class TestForwardKinematics:
    def test_pure_translations_accumulate(self):
        j = G.JointSpec((0, 0, 1), G.RigidTransform(np.eye(3), [0, 0, 0.2]), 0.05)
        chain = G.KinematicChain((j, j, j))
        pos = G.forward_kinematics(chain, [0.0, 0.0, 0.0])
        expected = [[0, 0, 0], [0, 0, 0.2], [0, 0, 0.4], [0, 0, 0.6]]
        np.testing.assert_allclose(pos, expected, atol=1e-12)

    def test_quarter_turn_about_z(self):
        j = G.JointSpec((0, 0, 1), G.RigidTransform(np.eye(3), [0.3, 0, 0]), 0.05)
        chain = G.KinematicChain((j,))
        pos = G.forward_kinematics(chain, [math.pi / 2])
        np.testing.assert_allclose(pos[1], [0, 0.3, 0], atol=1e-9)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(42)
        chain = rand_chain(rng, 7)
        for _ in range(50):
            angles = rng.uniform(-math.pi, math.pi, size=7)
            got = G.forward_kinematics(chain, angles)
            np.testing.assert_allclose(got, fk_oracle(chain, angles), atol=1e-9)

    @pytest.mark.parametrize("name,n", [("ur5like", 6), ("kukalike", 7)])
    def test_builtin_chains_match_oracle(self, name, n):
        chain = G.builtin_chain(name)
        rng = np.random.default_rng(7)
        for _ in range(200):
            angles = rng.uniform(-math.pi, math.pi, size=n)
            np.testing.assert_allclose(G.forward_kinematics(chain, angles),
                                       fk_oracle(chain, angles), atol=1e-9)

    def test_zero_angles_equal_cumulative_offsets(self):
        for name in G.CHAIN_NAMES:
            chain = G.builtin_chain(name)
            pos = G.forward_kinematics(chain, np.zeros(chain.n_joints))
            t = G.RigidTransform.identity()
            for i, joint in enumerate(chain.joints):
                t = G.compose(t, joint.offset)
                np.testing.assert_allclose(pos[i + 1], t.translation, atol=1e-12)

    def test_angle_count_mismatch(self):
        chain = G.builtin_chain("ur5like")
        with pytest.raises(G.AngleCountMismatch):
            G.forward_kinematics(chain, np.zeros(5))

    def test_rejects_non_finite_angles(self):
        chain = G.builtin_chain("ur5like")
        with pytest.raises(ValueError):
            G.forward_kinematics(chain, [0, 0, np.nan, 0, 0, 0])


class TestCompose:
    def test_identity_law(self):
        rng = np.random.default_rng(0)
        t = rand_transform(rng)
        got = G.compose(G.RigidTransform.identity(), t)
        np.testing.assert_allclose(got.rotation, t.rotation, atol=1e-15)
        np.testing.assert_allclose(got.translation, t.translation, atol=1e-15)

    def test_inverse_law(self):
        rng = np.random.default_rng(1)
        t = rand_transform(rng)
        ident = G.compose(t, t.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-9)

    def test_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a, b = rand_transform(rng), rand_transform(rng)
            ma, mb = np.eye(4), np.eye(4)
            ma[:3, :3], ma[:3, 3] = a.rotation, a.translation
            mb[:3, :3], mb[:3, 3] = b.rotation, b.translation
            mc = ma @ mb
            got = G.compose(a, b)
            np.testing.assert_allclose(got.rotation, mc[:3, :3], atol=1e-12)
            np.testing.assert_allclose(got.translation, mc[:3, 3], atol=1e-12)

    def test_distance_preservation(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            t = rand_transform(rng)
            p, q = rng.normal(size=3), rng.normal(size=3)
            before = np.linalg.norm(p - q)
            after = np.linalg.norm(t.apply(p) - t.apply(q))
            assert abs(before - after) < 1e-9

    def test_rejects_improper_rotation(self):
        flip = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            G.RigidTransform(flip, np.zeros(3))


class TestCamera:
    def cam(self, extrinsic=None):
        return G.PinholeCamera(200.0, 210.0, 128.0, 106.0, 256, 212,
                               extrinsic or G.RigidTransform.identity())

    def test_to_camera_frame_identity(self):
        pts = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(G.to_camera_frame(pts, self.cam()), pts, atol=1e-15)

    def test_to_camera_frame_translation(self):
        cam = self.cam(G.RigidTransform(np.eye(3), [0, 0, 1.0]))
        np.testing.assert_allclose(G.to_camera_frame(np.zeros(3), cam), [0, 0, 1.0])

    def test_to_camera_frame_matches_matrix_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            ext = rand_transform(rng)
            cam = self.cam(ext)
            p = rng.normal(size=3)
            m = np.eye(4)
            m[:3, :3], m[:3, 3] = ext.rotation, ext.translation
            expected = (m @ np.append(p, 1.0))[:3]
            np.testing.assert_allclose(G.to_camera_frame(p, cam), expected, atol=1e-12)

    def test_principal_point(self):
        u, v = G.project(self.cam(), (0, 0, 2.0))
        assert (u, v) == (128.0, 106.0)

    def test_similar_triangles(self):
        u, _ = G.project(self.cam(), (0.5, 0, 1.0))
        assert abs(u - 228.0) < 1e-9

    def test_behind_camera(self):
        with pytest.raises(G.BehindCamera):
            G.project(self.cam(), (0, 0, -1.0))

    @given(u=st.floats(0, 255), v=st.floats(0, 211), z=st.floats(0.1, 50))
    @settings(max_examples=50, deadline=None)
    def test_project_unproject_round_trip(self, u, v, z):
        cam = self.cam()
        p = G.unproject(cam, u, v, z)
        u2, v2 = G.project(cam, p)
        assert abs(u - u2) < 1e-9 and abs(v - v2) < 1e-9


class TestChains:
    def test_families(self):
        assert G.builtin_chain("ur3like").n_joints == 6
        assert G.builtin_chain("kukalike").n_joints == 7
        with pytest.raises(KeyError):
            G.builtin_chain("irb")

    def test_ur_variants_are_scaled_copies(self):
        small, big = G.builtin_chain("ur3like"), G.builtin_chain("ur10like")
        assert abs(big.reach / small.reach - 3.0) < 1e-9

    def test_config_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        chain = rand_chain(rng, 6)
        path = tmp_path / "chain.json"
        G.save_chain(chain, path)
        loaded = G.load_chain(path)
        angles = rng.uniform(-2, 2, size=6)
        np.testing.assert_allclose(G.forward_kinematics(loaded, angles),
                                   G.forward_kinematics(chain, angles), atol=1e-9)
        for a, b in zip(loaded.joints, chain.joints):
            assert abs(a.radius - b.radius) < 1e-12
