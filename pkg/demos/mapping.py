"""Recover an ellipsoid's pose and shape from masks and keypoints.

A sphere mean model is aligned to triangulated keypoints, then its pose and
vertices are refined against 1, 2, 3, 5 and 8 synthetic views. Voxel IoU
against the true ellipsoid rises with the number of views.

    python3 demos/mapping.py
"""
from meshmap.estimator import OptimConfig
from meshmap.pipeline import MAPPING_OPTIM, default_config, mean_model_from_config, run_mapping
from meshmap.sim import mapping_scene


def main():
    scene = mapping_scene(n_views=8)
    mean = mean_model_from_config(default_config("map"))
    views = (1, 2, 3, 5, 8)
    res = run_mapping(scene, mean, OptimConfig(**MAPPING_OPTIM), views)[0]
    print(f"mean model after keypoint alignment: voxel IoU {res.initial_report['voxel_iou']:.3f}")
    for n in views:
        rep = res.reports[n]
        print(f"{n} views: voxel IoU {rep['voxel_iou']:.3f}, "
              f"mean mask IoU {rep['mean_mask_iou']:.3f}")


if __name__ == "__main__":
    main()
