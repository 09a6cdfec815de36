import os

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

from pymemrecon.core.find import (
    find_frames,
    find_point_clouds,
    find_scene_dirs,
)
from pymemrecon.core.io import CAMERA_FILE_NAME


def touch(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b'')
    return path.resolve()


class TestFindFrames(TestCase):

    def test__target_dir_does_not_exist__non_recursive_search__file_not_found_error_raised(self):
        target_dir = TemporaryDirectory().name

        with self.assertRaises(FileNotFoundError):
            list(find_frames(target_dir, recursive=False))

    def test__target_dir_does_not_exist__recursive_search__file_not_found_error_raised(self):
        target_dir = TemporaryDirectory().name

        with self.assertRaises(FileNotFoundError):
            list(find_frames(target_dir, recursive=True))

    def test__no_frames_in_target_dir__no_paths_generated(self):
        with TemporaryDirectory() as target_dir:
            touch(Path(target_dir, 'notes.txt'))
            touch(Path(target_dir, 'cloud.ply'))

            self.assertEqual(list(find_frames(target_dir)), [])

    def test__mixed_image_extensions__sorted_file_name_order(self):
        with TemporaryDirectory() as target_dir:
            expected = [
                touch(Path(target_dir, '0000.ppm')),
                touch(Path(target_dir, '0001.PNG')),
                touch(Path(target_dir, '0002.jpg')),
                touch(Path(target_dir, '0003.jpeg')),
            ]
            touch(Path(target_dir, 'camera.json'))

            self.assertEqual(list(find_frames(target_dir)), expected)

    def test__frames_in_subdirectories__non_recursive_search__root_frames_only(self):
        with TemporaryDirectory() as target_dir:
            root_frame = touch(Path(target_dir, 'b.ppm'))
            touch(Path(target_dir, 'sub', 'a.ppm'))

            self.assertEqual(list(find_frames(target_dir, recursive=False)), [root_frame])

    def test__frames_in_subdirectories__recursive_search__top_down_sorted_order(self):
        with TemporaryDirectory() as target_dir:
            expected = [
                touch(Path(target_dir, 'b.ppm')),
                touch(Path(target_dir, 'a_dir', 'c.ppm')),
                touch(Path(target_dir, 'z_dir', 'a.ppm')),
            ]

            self.assertEqual(list(find_frames(target_dir, recursive=True)), expected)


class TestFindPointClouds(TestCase):

    def test__ply_files__only_ply_paths_generated(self):
        with TemporaryDirectory() as target_dir:
            expected = [touch(Path(target_dir, '0000.ply')), touch(Path(target_dir, '0001.ply'))]
            touch(Path(target_dir, '0000.ppm'))

            self.assertEqual(list(find_point_clouds(target_dir)), expected)

    def test__target_dir_does_not_exist__file_not_found_error_raised(self):
        target_dir = TemporaryDirectory().name

        with self.assertRaises(FileNotFoundError):
            list(find_point_clouds(target_dir))


class TestFindSceneDirs(TestCase):

    def test__target_dir_is_a_scene_dump__target_dir_generated(self):
        with TemporaryDirectory() as target_dir:
            touch(Path(target_dir, CAMERA_FILE_NAME))

            self.assertEqual(list(find_scene_dirs(target_dir)), [Path(target_dir).resolve()])

    def test__scene_dumps_in_subdirectories__non_recursive_search__direct_children_only(self):
        with TemporaryDirectory() as target_dir:
            touch(Path(target_dir, 'scene_0001', CAMERA_FILE_NAME))
            touch(Path(target_dir, 'scene_0000', CAMERA_FILE_NAME))
            touch(Path(target_dir, 'nested', 'scene_0002', CAMERA_FILE_NAME))
            os.mkdir(Path(target_dir, 'empty'))

            self.assertEqual(
                list(find_scene_dirs(target_dir)),
                [Path(target_dir, 'scene_0000').resolve(), Path(target_dir, 'scene_0001').resolve()]
            )

    def test__nested_scene_dumps__recursive_search__all_generated(self):
        with TemporaryDirectory() as target_dir:
            touch(Path(target_dir, 'scene_0000', CAMERA_FILE_NAME))
            touch(Path(target_dir, 'nested', 'scene_0002', CAMERA_FILE_NAME))

            self.assertEqual(
                list(find_scene_dirs(target_dir, recursive=True)),
                [Path(target_dir, 'scene_0000').resolve(), Path(target_dir, 'nested', 'scene_0002').resolve()]
            )

    def test__target_dir_does_not_exist__file_not_found_error_raised(self):
        target_dir = TemporaryDirectory().name

        with self.assertRaises(FileNotFoundError):
            list(find_scene_dirs(target_dir))
