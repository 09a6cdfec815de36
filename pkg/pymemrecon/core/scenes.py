"""
Procedural scenes: textured planes, spheres and boxes inside an enclosing
box, rendered by ray casting along a camera trajectory, with exact
ground-truth pointmaps.

Cameras follow the OpenCV convention (x right, y down, z forward); a pose
is the 4 x 4 world-from-camera transform. The ray through the centre of
pixel ``(i, j)`` is ``((j + 0.5 - cx) / fx, (i + 0.5 - cy) / fy, 1)`` in
camera coordinates, so the ray parameter of a hit is its depth.
"""
__all__ = [
    'Box',
    'DataConfig',
    'Plane',
    'SceneParams',
    'SceneSample',
    'Sphere',
    'TRAJECTORIES',
    'backproject',
    'camera_rays',
    'generate_scene',
    'intrinsics_matrix',
    'look_at',
    'make_trajectory',
    'render_view',
    'sample_clip',
    'value_noise',
]


import logging

from dataclasses import (
    asdict,
    dataclass,
    field,
    replace,
)
from typing import Optional

import numpy as np

from .grids import Pointmap
from ..exceptions import DegenerateInputError
from ..utils import seed_stream


logger = logging.getLogger(__name__)


TRAJECTORIES = ('orbit', 'forward', 'random_walk')

HIT_EPS = 1e-6

ORBIT_RADIUS = 3.0

BACKGROUND_HALF_SIZE = 4.0

PRIMITIVE_EXTENT = 1.2


def value_noise(points, seed, frequency=2.0):
    """
    Deterministic 3D value noise in ``[0, 1]``: random values on an integer
    lattice (hashed through a seeded permutation table), trilinearly
    interpolated with a smoothstep fade.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    lattice = rng.random(256)

    scaled = np.asarray(points, dtype=np.float64) * frequency
    base = np.floor(scaled)
    frac = scaled - base
    fade = frac * frac * (3.0 - 2.0 * frac)
    base = base.astype(np.int64)

    def corner(dx, dy, dz):
        ix = (base[..., 0] + dx) & 255
        iy = (base[..., 1] + dy) & 255
        iz = (base[..., 2] + dz) & 255
        return lattice[perm[(perm[(perm[ix] + iy) & 255] + iz) & 255]]

    result = 0.0
    for dx in (0, 1):
        wx = fade[..., 0] if dx else 1.0 - fade[..., 0]
        for dy in (0, 1):
            wy = fade[..., 1] if dy else 1.0 - fade[..., 1]
            for dz in (0, 1):
                wz = fade[..., 2] if dz else 1.0 - fade[..., 2]
                result = result + wx * wy * wz * corner(dx, dy, dz)
    return result


def _in_plane_axes(normal):
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


@dataclass(frozen=True)
class Plane:
    """
    A plane through ``point`` with normal ``normal``; finite (a square of
    half side ``half_size``) unless ``half_size`` is ``None``.
    """
    point: tuple
    normal: tuple
    half_size: Optional[float] = None
    color: tuple = (0.8, 0.8, 0.8)
    texture_seed: int = 0

    def intersect(self, origin, directions):
        normal = np.asarray(self.normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        point = np.asarray(self.point, dtype=np.float64)

        denom = directions @ normal
        parallel = np.abs(denom) < 1e-12
        t = np.where(parallel, np.inf, ((point - origin) @ normal) / np.where(parallel, 1.0, denom))
        t = np.where(t > HIT_EPS, t, np.inf)

        if self.half_size is not None:
            u, v = _in_plane_axes(normal)
            finite = np.isfinite(t)
            hits = origin + np.where(finite, t, 0.0)[:, None] * directions
            local = hits - point
            inside = (np.abs(local @ u) <= self.half_size) & (np.abs(local @ v) <= self.half_size)
            t = np.where(finite & inside, t, np.inf)

        return t


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple = (0.8, 0.8, 0.8)
    texture_seed: int = 0

    def intersect(self, origin, directions):
        center = np.asarray(self.center, dtype=np.float64)
        offset = origin - center
        a = np.sum(directions * directions, axis=-1)
        b = 2.0 * directions @ offset
        c = offset @ offset - self.radius ** 2
        disc = b * b - 4.0 * a * c

        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        near = (-b - root) / (2.0 * a)
        far = (-b + root) / (2.0 * a)
        t = np.where(near > HIT_EPS, near, far)
        return np.where(hit & (t > HIT_EPS), t, np.inf)


@dataclass(frozen=True)
class Box:
    """
    An axis-aligned box. Rays starting inside the box hit its far side, so
    a large box serves as the enclosing background.
    """
    center: tuple
    half_size: tuple
    color: tuple = (0.8, 0.8, 0.8)
    texture_seed: int = 0

    def intersect(self, origin, directions):
        center = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.half_size, dtype=np.float64)
        safe = np.where(np.abs(directions) < 1e-12, 1e-12, directions)

        t1 = (center - half - origin) / safe
        t2 = (center + half - origin) / safe
        t_near = np.max(np.minimum(t1, t2), axis=-1)
        t_far = np.min(np.maximum(t1, t2), axis=-1)

        hit = t_far >= np.maximum(t_near, HIT_EPS)
        t = np.where(t_near > HIT_EPS, t_near, t_far)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class SceneParams:
    n_frames: int = 24
    n_primitives: int = 4
    trajectory: str = 'orbit'
    image_size: int = 32
    sky: bool = False
    fov_degrees: float = 60.0


@dataclass(frozen=True)
class DataConfig:
    """
    Synthetic training data: ``n_scenes`` scenes of ``n_frames`` frames.
    """
    n_scenes: int = 4
    n_frames: int = 24
    n_primitives: int = 4
    trajectory: str = 'orbit'
    sky: bool = False
    fov_degrees: float = 60.0

    def validate(self):
        errors = []
        if not isinstance(self.n_scenes, int) or self.n_scenes < 1:
            errors.append(f'n_scenes: must be a positive integer, got {self.n_scenes!r}')
        if not isinstance(self.n_frames, int) or self.n_frames < 2:
            errors.append(f'n_frames: must be an integer >= 2, got {self.n_frames!r}')
        if not isinstance(self.n_primitives, int) or self.n_primitives < 1:
            errors.append(f'n_primitives: must be a positive integer, got {self.n_primitives!r}')
        if self.trajectory not in TRAJECTORIES:
            errors.append(f'trajectory: must be one of {list(TRAJECTORIES)}, got {self.trajectory!r}')
        if not 0 < self.fov_degrees < 180:
            errors.append(f'fov_degrees: must lie in (0, 180), got {self.fov_degrees!r}')
        return errors

    def scene_params(self, image_size):
        return SceneParams(
            n_frames=self.n_frames,
            n_primitives=self.n_primitives,
            trajectory=self.trajectory,
            image_size=image_size,
            sky=self.sky,
            fov_degrees=self.fov_degrees,
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class SceneSample:
    """
    A rendered frame sequence. Poses are world-from-camera transforms with
    the first frame's camera as the world frame; ground-truth pointmaps are
    in that world frame.
    """
    frames: list
    intrinsics: np.ndarray
    poses: list
    gt_pointmaps: list
    depths: list
    diameter: float
    frame_indices: list = field(default_factory=list)
    seed: Optional[int] = None

    def __len__(self):
        return len(self.frames)

    @property
    def image_size(self):
        return self.frames[0].shape[0]


def intrinsics_matrix(image_size, fov_degrees=60.0):
    focal = 0.5 * image_size / np.tan(np.radians(fov_degrees) / 2.0)
    centre = image_size / 2.0
    return np.array([
        [focal, 0.0, centre],
        [0.0, focal, centre],
        [0.0, 0.0, 1.0],
    ])


def camera_rays(intrinsics, height, width):
    """
    Returns the ``(H, W, 3)`` camera-frame ray directions through the pixel
    centres, each with unit z component.
    """
    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    cx, cy = intrinsics[0, 2], intrinsics[1, 2]
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    return np.stack([
        (cols + 0.5 - cx) / fx,
        (rows + 0.5 - cy) / fy,
        np.ones((height, width)),
    ], axis=-1)


def backproject(depth, intrinsics, pose):
    """
    Lifts an ``(H, W)`` depth map to world points using the camera-to-world
    ``pose``.
    """
    height, width = depth.shape
    camera_points = camera_rays(intrinsics, height, width) * depth[..., None]
    return camera_points @ pose[:3, :3].T + pose[:3, 3]


def look_at(eye, target, down=(0.0, 1.0, 0.0)):
    """
    World-from-camera pose of a camera at ``eye`` looking at ``target``
    with the camera's y axis pointing along ``down`` as far as possible.

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If ``eye`` equals ``target`` or the view direction is parallel to
        ``down``
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    length = np.linalg.norm(forward)
    if length < 1e-12:
        raise DegenerateInputError('camera eye and target coincide')
    z = forward / length
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateInputError('view direction is parallel to the down vector')
    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    pose = np.eye(4)
    pose[:3, :3] = np.stack([x, y, z], axis=-1)
    pose[:3, 3] = eye
    return pose


def make_trajectory(kind, n_frames, rng):
    """
    Absolute world-from-camera poses for a trajectory kind: ``'orbit'``
    circles the scene at a fixed radius, ``'forward'`` moves towards the
    scene centre, ``'random_walk'`` perturbs an orbit position from frame
    to frame.
    """
    if kind not in TRAJECTORIES:
        raise ValueError(f'unknown trajectory "{kind}", expected one of {list(TRAJECTORIES)}')

    start = rng.uniform(0.0, 2.0 * np.pi)
    height = -rng.uniform(0.3, 0.8)
    poses = []

    if kind == 'orbit':
        for angle in start + np.linspace(0.0, 2.0 * np.pi, n_frames, endpoint=False):
            eye = (ORBIT_RADIUS * np.cos(angle), height, ORBIT_RADIUS * np.sin(angle))
            poses.append(look_at(eye, (0.0, 0.0, 0.0)))
    elif kind == 'forward':
        direction = np.array([np.cos(start), 0.0, np.sin(start)])
        for distance in np.linspace(ORBIT_RADIUS, 2.3, n_frames):
            eye = direction * distance + np.array([0.0, height, 0.0])
            poses.append(look_at(eye, (0.0, 0.0, 0.0)))
    else:
        angle = start
        for _ in range(n_frames):
            eye = (ORBIT_RADIUS * np.cos(angle), height, ORBIT_RADIUS * np.sin(angle))
            jitter = rng.normal(0.0, 0.1, size=3)
            poses.append(look_at(eye, jitter))
            angle += rng.uniform(0.05, 0.35)
            height = float(np.clip(height + rng.normal(0.0, 0.1), -1.0, -0.1))

    return poses


def _random_primitive(rng, texture_seed):
    kind = rng.choice(['sphere', 'box', 'plane'])
    center = tuple(rng.uniform(-PRIMITIVE_EXTENT, PRIMITIVE_EXTENT, size=3))
    color = tuple(rng.uniform(0.2, 1.0, size=3))
    size = float(rng.uniform(0.3, 0.6))

    if kind == 'sphere':
        return Sphere(center, size, color, texture_seed)
    if kind == 'box':
        return Box(center, tuple(rng.uniform(0.2, 0.5, size=3)), color, texture_seed)
    normal = rng.normal(size=3)
    return Plane(center, tuple(normal / np.linalg.norm(normal)), size, color, texture_seed)


def _background(rng):
    return Box(
        (0.0, 0.0, 0.0),
        (BACKGROUND_HALF_SIZE,) * 3,
        tuple(rng.uniform(0.3, 0.7, size=3)),
        int(rng.integers(2 ** 31)),
    )


def render_view(primitives, intrinsics, pose, height, width):
    """
    Renders one view by closest-hit ray casting.

    Parameters
    ----------
    ``primitives`` : ``list``
        ``Plane``, ``Sphere`` and ``Box`` objects

    ``intrinsics`` : ``numpy.ndarray``
        ``3 x 3`` pinhole intrinsics

    ``pose`` : ``numpy.ndarray``
        ``4 x 4`` world-from-camera transform

    ``height``, ``width`` : ``int``
        Image size in pixels

    Returns
    -------
    ``tuple`` :
        ``(image, depth, valid)`` - a ``uint8`` ``(H, W, 3)`` image, the
        ``(H, W)`` depth map (zero where no primitive was hit) and the
        ``(H, W)`` hit mask
    """
    rays = camera_rays(intrinsics, height, width).reshape(-1, 3)
    directions = rays @ pose[:3, :3].T
    origin = pose[:3, 3]

    depth = np.full(rays.shape[0], np.inf)
    owner = np.full(rays.shape[0], -1)
    for position, primitive in enumerate(primitives):
        t = primitive.intersect(origin, directions)
        closer = t < depth
        depth = np.where(closer, t, depth)
        owner = np.where(closer, position, owner)

    valid = np.isfinite(depth)
    colors = np.zeros((rays.shape[0], 3))
    hits = origin + np.where(valid, depth, 0.0)[:, None] * directions
    for position, primitive in enumerate(primitives):
        selected = owner == position
        if not selected.any():
            continue
        shade = 0.35 + 0.65 * value_noise(hits[selected], primitive.texture_seed)
        colors[selected] = np.asarray(primitive.color) * shade[:, None]

    image = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    depth = np.where(valid, depth, 0.0)

    return (
        image.reshape(height, width, 3),
        depth.reshape(height, width),
        valid.reshape(height, width),
    )


def _scene_diameter(pointmaps):
    points = np.concatenate([pm.valid_points() for pm in pointmaps], axis=0)
    if points.shape[0] == 0:
        return 0.0
    centroid = points.mean(axis=0)
    return float(2.0 * np.max(np.linalg.norm(points - centroid, axis=-1)))


def generate_scene(seed, params=None, primitives=None):
    """
    Generates and renders a scene.

    Parameters
    ----------
    ``seed`` : ``int``
        Scene seed - equal seeds give bit-identical scenes

    ``params`` : ``SceneParams``, ``None``
        Frame count, primitive count, trajectory kind, image size, ``sky``
        (no enclosing background box, so some pixels are invalid) and the
        field of view

    ``primitives`` : ``list``, ``None``
        Explicit primitives to render instead of random ones (the enclosing
        box is still added unless ``sky`` is set)

    Returns
    -------
    ``pymemrecon.core.scenes.SceneSample``

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If fewer than two frames or no primitives are requested
    """
    params = params if params is not None else SceneParams()
    if params.n_frames < 2:
        raise DegenerateInputError(f'a scene needs at least 2 frames, got {params.n_frames}')
    if params.trajectory not in TRAJECTORIES:
        raise ValueError(f'unknown trajectory "{params.trajectory}"')

    rng = seed_stream(seed, 'data')
    if primitives is None:
        if params.n_primitives < 1:
            raise DegenerateInputError('a scene needs at least one primitive')
        primitives = [
            _random_primitive(rng, int(rng.integers(2 ** 31)))
            for _ in range(params.n_primitives)
        ]
    elif not primitives:
        raise DegenerateInputError('a scene needs at least one primitive')
    primitives = list(primitives)
    if not params.sky:
        primitives.append(_background(rng))

    size = params.image_size
    intrinsics = intrinsics_matrix(size, params.fov_degrees)
    world_poses = make_trajectory(params.trajectory, params.n_frames, rng)
    first_inverse = np.linalg.inv(world_poses[0])

    frames, poses, depths, pointmaps = [], [], [], []
    for world_pose in world_poses:
        image, depth, valid = render_view(primitives, intrinsics, world_pose, size, size)
        pose = first_inverse @ world_pose
        points = np.where(valid[..., None], backproject(depth, intrinsics, pose), 0.0)
        frames.append(image)
        poses.append(pose)
        depths.append(depth)
        pointmaps.append(Pointmap(points, valid))

    logger.debug('generated scene %d: %d frames, %d primitives', seed, len(frames), len(primitives))

    return SceneSample(
        frames=frames,
        intrinsics=intrinsics,
        poses=poses,
        gt_pointmaps=pointmaps,
        depths=depths,
        diameter=_scene_diameter(pointmaps),
        frame_indices=list(range(len(frames))),
        seed=seed,
    )


def sample_clip(scene, interval, n_frames, rng=None, start=None):
    """
    Takes ``n_frames`` frames spaced ``interval`` apart, re-expressed so
    that the clip's first camera is the world frame.

    Parameters
    ----------
    ``scene`` : ``SceneSample``
        The source scene

    ``interval`` : ``int``
        Frame spacing ``T``

    ``n_frames`` : ``int``
        Clip length

    ``rng`` : ``numpy.random.Generator``, ``None``
        Draws the start index when ``start`` is not given

    ``start`` : ``int``, ``None``
        Explicit start index

    Returns
    -------
    ``SceneSample`` :
        The clip; ``frame_indices`` holds the source indices

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If the scene is too short for the clip
    """
    span = (n_frames - 1) * interval
    if interval < 1 or n_frames < 1 or span >= len(scene):
        raise DegenerateInputError(
            f'a clip of {n_frames} frames at interval {interval} needs more than {span} '
            f'frames, the scene has {len(scene)}'
        )
    if start is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        start = int(rng.integers(0, len(scene) - span))
    elif not 0 <= start < len(scene) - span:
        raise DegenerateInputError(f'clip start {start} leaves too few frames')

    indices = [start + k * interval for k in range(n_frames)]
    to_clip = np.linalg.inv(scene.poses[start])

    poses, pointmaps = [], []
    for i in indices:
        poses.append(to_clip @ scene.poses[i])
        source = scene.gt_pointmaps[i]
        points = source.array @ to_clip[:3, :3].T + to_clip[:3, 3]
        pointmaps.append(Pointmap(np.where(source.valid[..., None], points, 0.0), source.valid))

    return replace(
        scene,
        frames=[scene.frames[i] for i in indices],
        poses=poses,
        gt_pointmaps=pointmaps,
        depths=[scene.depths[i] for i in indices],
        frame_indices=[scene.frame_indices[i] for i in indices],
    )
