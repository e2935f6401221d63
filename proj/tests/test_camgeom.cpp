#include "splatpose/camera.hpp"
#include "splatpose/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace splatpose;

namespace {

constexpr double kDeg = M_PI / 180.0;

Camera random_camera(Rng& rng, int w = 64, int h = 64) {
    Camera cam;
    const double f = rng.uniform(0.6, 1.6) * w;
    cam.K = Eigen::Matrix3d::Identity();
    cam.K(0, 0) = f;
    cam.K(1, 1) = f * rng.uniform(0.85, 1.15);
    cam.K(0, 2) = w * rng.uniform(0.4, 0.6);
    cam.K(1, 2) = h * rng.uniform(0.4, 0.6);
    cam.width = w;
    cam.height = h;
    const Eigen::Vector3d axis =
        Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    cam.R = Eigen::AngleAxisd(rng.uniform(0.0, 3.0), axis).toRotationMatrix();
    cam.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    return cam;
}

std::vector<Eigen::Vector2d> random_uv(Rng& rng, int n, int w = 64, int h = 64) {
    std::vector<Eigen::Vector2d> uv;
    for (int i = 0; i < n; ++i)
        uv.emplace_back(rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0));
    return uv;
}

}  // namespace

TEST(CamerasToRays, OriginCameraHasZeroMoment) {
    Camera cam;  // identity everything
    const RaySet rays = cameras_to_rays(cam, {{0.0, 0.0}});
    EXPECT_NEAR(rays.rays[0].d.x(), 0.0, 1e-15);
    EXPECT_NEAR(rays.rays[0].d.y(), 0.0, 1e-15);
    EXPECT_NEAR(rays.rays[0].d.z(), 1.0, 1e-15);
    EXPECT_NEAR(rays.rays[0].m.norm(), 0.0, 1e-15);
}

TEST(CamerasToRays, HandDerivedTranslatedCase) {
    // K=I, R=I, t=(0,0,-1): center c=(0,0,1); u=(1,0,1) -> d=(1,0,1)/sqrt2,
    // m = c x d = (0,1,0)/sqrt2 by the cross-product oracle.
    Camera cam;
    cam.t = Eigen::Vector3d(0, 0, -1);
    const RaySet rays = cameras_to_rays(cam, {{1.0, 0.0}});
    const double s = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(rays.rays[0].d.x(), s, 1e-12);
    EXPECT_NEAR(rays.rays[0].d.y(), 0.0, 1e-12);
    EXPECT_NEAR(rays.rays[0].d.z(), s, 1e-12);
    EXPECT_NEAR(rays.rays[0].m.x(), 0.0, 1e-12);
    EXPECT_NEAR(rays.rays[0].m.y(), s, 1e-12);
    EXPECT_NEAR(rays.rays[0].m.z(), 0.0, 1e-12);
}

TEST(CamerasToRays, ProjectionRoundTrip) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Camera cam = random_camera(rng);
        const auto uv = random_uv(rng, 8);
        const RaySet rays = cameras_to_rays(cam, uv);
        const Eigen::Vector3d c = cam.center();
        for (double lambda : {0.5, 1.0, 10.0}) {
            std::vector<Eigen::Vector3d> pts;
            for (const auto& r : rays.rays) pts.push_back(c + lambda * r.d);
            const ProjectionResult proj = project_points(cam, pts);
            for (size_t i = 0; i < uv.size(); ++i) {
                ASSERT_TRUE(proj.valid[i]);
                EXPECT_NEAR(proj.uv[i].x(), uv[i].x(), 1e-9);
                EXPECT_NEAR(proj.uv[i].y(), uv[i].y(), 1e-9);
            }
        }
    }
}

TEST(CamerasToRays, PlueckerConstraintHolds) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const Camera cam = random_camera(rng);
        const RaySet rays = cameras_to_rays(cam, random_uv(rng, 4));
        for (const auto& r : rays.rays) {
            EXPECT_NEAR(r.d.dot(r.m), 0.0, 1e-9);
            EXPECT_NEAR(r.d.norm(), 1.0, 1e-12);
        }
    }
}

TEST(RaysToCenter, HandConstructedIntersection) {
    // both rays pass through (0,0,1)
    RaySet rays;
    rays.rays.push_back({{0, 0, 1}, {0, 0, 0}});
    Eigen::Vector3d d(1, 0, 0);
    Eigen::Vector3d c(0, 0, 1);
    rays.rays.push_back({d, c.cross(d)});
    rays.uv = {{0, 0}, {0, 0}};
    const CenterResult res = rays_to_camera_center(rays);
    EXPECT_NEAR((res.c - Eigen::Vector3d(0, 0, 1)).norm(), 0.0, 1e-12);
    EXPECT_NEAR(res.residual_rms, 0.0, 1e-12);
}

TEST(RaysToCenter, AllZeroMomentsGiveOrigin) {
    RaySet rays;
    rays.rays.push_back({{0, 0, 1}, {0, 0, 0}});
    rays.rays.push_back({{1, 0, 0}, {0, 0, 0}});
    rays.rays.push_back({{0, 1, 0}, {0, 0, 0}});
    rays.uv.resize(3);
    EXPECT_NEAR(rays_to_camera_center(rays).c.norm(), 0.0, 1e-12);
}

TEST(RaysToCenter, RoundTripRecovery) {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const Camera cam = random_camera(rng);
        const RaySet rays = cameras_to_rays(cam, random_uv(rng, 16));
        const CenterResult res = rays_to_camera_center(rays);
        EXPECT_LT((res.c - cam.center()).norm(), 1e-8);
    }
}

TEST(RaysToCenter, ParallelRaysDegenerate) {
    RaySet rays;
    rays.rays.push_back({{0, 0, 1}, {0, 0, 0}});
    rays.rays.push_back({{0, 0, 1}, {1e-9, 0, 0}});
    rays.uv.resize(2);
    EXPECT_THROW(rays_to_camera_center(rays), std::runtime_error);
}

TEST(RqDecompose, Identity) {
    const RQResult rq = rq_decompose(Eigen::Matrix3d::Identity());
    EXPECT_LT((rq.K - Eigen::Matrix3d::Identity()).norm(), 1e-14);
    EXPECT_LT((rq.R - Eigen::Matrix3d::Identity()).norm(), 1e-14);
    EXPECT_NEAR(rq.s, 1.0, 1e-14);
}

TEST(RqDecompose, DiagonalByInspection) {
    Eigen::Matrix3d m = Eigen::Vector3d(2, 2, 1).asDiagonal();
    const RQResult rq = rq_decompose(m);
    EXPECT_LT((rq.K - m).norm(), 1e-14);
    EXPECT_LT((rq.R - Eigen::Matrix3d::Identity()).norm(), 1e-14);
}

TEST(RqDecompose, ComposeThenDecompose) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Camera cam = random_camera(rng);
        const Eigen::Matrix3d m = cam.K * cam.R;
        const RQResult rq = rq_decompose(m);
        EXPECT_LT((rq.K - cam.K).norm() / cam.K.norm(), 1e-9);
        EXPECT_LT((rq.R - cam.R).norm(), 1e-9);
    }
}

TEST(RqDecompose, RandomNonsingularFactorInvariants) {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::Matrix3d m;
        for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = rng.normal();
        if (std::abs(m.determinant()) < 1e-3) continue;
        const RQResult rq = rq_decompose(m);
        // factor invariants
        EXPECT_GT(rq.K(0, 0), 0.0);
        EXPECT_GT(rq.K(1, 1), 0.0);
        EXPECT_NEAR(rq.K(2, 2), 1.0, 1e-14);
        EXPECT_LT((rq.R.transpose() * rq.R - Eigen::Matrix3d::Identity()).norm(), 1e-13);
        EXPECT_NEAR(rq.R.determinant(), 1.0, 1e-13);
        // reconstruction
        const Eigen::Matrix3d rec = rq.s * rq.K * rq.R;
        EXPECT_LT((rec - m).norm() / m.norm(), 1e-12);
    }
}

TEST(RaysToCamera, RoundTripIntrinsicsFree) {
    Rng rng(17);
    Camera cam;
    cam.K = Eigen::Matrix3d::Identity();
    cam.K(0, 0) = 100;
    cam.K(1, 1) = 100;
    cam.K(0, 2) = 32;
    cam.K(1, 2) = 32;
    cam.width = 64;
    cam.height = 64;
    const Eigen::Vector3d axis =
        Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    cam.R = Eigen::AngleAxisd(1.1, axis).toRotationMatrix();
    cam.t = Eigen::Vector3d(0.4, -0.2, 0.7);
    const RaySet rays = cameras_to_rays(cam, random_uv(rng, 16));
    const Camera rec = rays_to_camera(rays, std::nullopt, 64, 64);
    EXPECT_LT(pose_error(rec, cam).rot_deg * kDeg, 1e-6);
    EXPECT_LT((rec.t - cam.t).norm(), 1e-6);
    for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b)
            EXPECT_NEAR(rec.K(a, b), cam.K(a, b), 1e-6 * std::max(1.0, std::abs(cam.K(a, b))));
}

TEST(RaysToCamera, IdentityCameraCanonicalRays) {
    Rng rng(19);
    Camera cam;  // K=R=I, t=0
    cam.width = cam.height = 2;
    const RaySet rays = cameras_to_rays(cam, random_uv(rng, 12, 2, 2));
    const Camera rec = rays_to_camera(rays, std::nullopt, 2, 2);
    EXPECT_LT((rec.K - Eigen::Matrix3d::Identity()).norm(), 1e-9);
    EXPECT_LT((rec.R - Eigen::Matrix3d::Identity()).norm(), 1e-9);
    EXPECT_LT(rec.t.norm(), 1e-9);
}

TEST(RaysToCamera, TooFewRaysThrows) {
    Rng rng(23);
    const Camera cam = random_camera(rng);
    const RaySet rays = cameras_to_rays(cam, random_uv(rng, 3));
    EXPECT_THROW(rays_to_camera(rays, std::nullopt), std::invalid_argument);
}

TEST(RaysToCamera, KnownKProcrustesPath) {
    Rng rng(29);
    for (int trial = 0; trial < 50; ++trial) {
        const Camera cam = random_camera(rng);
        const RaySet rays = cameras_to_rays(cam, random_uv(rng, 16));
        const Camera rec = rays_to_camera(rays, cam.K, cam.width, cam.height);
        EXPECT_LT(pose_error(rec, cam).rot_deg * kDeg, 1e-7);
        EXPECT_LT((rec.t - cam.t).norm(), 1e-7);
    }
}

TEST(RaysToCamera, ReprojectionConsistency) {
    Rng rng(31);
    const Camera cam = random_camera(rng);
    const auto uv = random_uv(rng, 16);
    const RaySet rays = cameras_to_rays(cam, uv);
    const Camera rec = rays_to_camera(rays, std::nullopt, cam.width, cam.height);
    const Eigen::Vector3d c = rec.center();
    std::vector<Eigen::Vector3d> pts;
    for (const auto& r : rays.rays) pts.push_back(c + r.d);
    const ProjectionResult proj = project_points(rec, pts);
    for (size_t i = 0; i < uv.size(); ++i) {
        ASSERT_TRUE(proj.valid[i]);
        EXPECT_NEAR(proj.uv[i].x(), uv[i].x(), 1e-6);
        EXPECT_NEAR(proj.uv[i].y(), uv[i].y(), 1e-6);
    }
}

TEST(ProjectPoints, HandPinhole) {
    Camera cam;
    cam.K << 100, 0, 32, 0, 100, 32, 0, 0, 1;
    cam.width = cam.height = 64;
    const ProjectionResult res = project_points(cam, {{0, 0, 2}});
    EXPECT_TRUE(res.valid[0]);
    EXPECT_NEAR(res.uv[0].x(), 32.0, 1e-12);
    EXPECT_NEAR(res.uv[0].y(), 32.0, 1e-12);
    EXPECT_NEAR(res.depth[0], 2.0, 1e-12);
}

TEST(ProjectPoints, CameraCenterInvalid) {
    Rng rng(37);
    const Camera cam = random_camera(rng);
    const ProjectionResult res = project_points(cam, {cam.center()});
    EXPECT_FALSE(res.valid[0]);
}

TEST(ProjectPoints, OpticalAxisHitsPrincipalPoint) {
    Camera cam;
    cam.K << 80, 0, 20, 0, 90, 24, 0, 0, 1;
    cam.width = 40;
    cam.height = 48;
    const ProjectionResult res = project_points(cam, {{0, 0, 1}});
    EXPECT_NEAR(res.uv[0].x(), 20.0, 1e-12);
    EXPECT_NEAR(res.uv[0].y(), 24.0, 1e-12);
}

TEST(NormalizeRay, ScalesBothParts) {
    const PlueckerRay r = normalize_ray({{0, 0, 2}, {0, 4, 0}});
    EXPECT_NEAR(r.d.z(), 1.0, 1e-15);
    EXPECT_NEAR(r.m.y(), 2.0, 1e-15);
}

TEST(NormalizeRay, IdempotentAndInvariant) {
    Rng rng(41);
    for (int i = 0; i < 20; ++i) {
        Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
        Eigen::Vector3d p(rng.normal(), rng.normal(), rng.normal());
        PlueckerRay r{d, p.cross(d)};
        const PlueckerRay n1 = normalize_ray(r);
        const PlueckerRay n2 = normalize_ray(n1);
        EXPECT_NEAR((n1.d - n2.d).norm(), 0.0, 1e-15);
        EXPECT_NEAR((n1.m - n2.m).norm(), 0.0, 1e-15);
        EXPECT_NEAR(n1.d.dot(n1.m), 0.0, 1e-12);
    }
    EXPECT_THROW(normalize_ray({{0, 0, 0}, {0, 0, 0}}), std::invalid_argument);
}

TEST(PoseError, ExactMatchIsZero) {
    Rng rng(43);
    const Camera cam = random_camera(rng);
    const PoseError e = pose_error(cam, cam);
    EXPECT_NEAR(e.rot_deg, 0.0, 1e-9);
    EXPECT_NEAR(e.trans_deg, 0.0, 1e-9);
}

TEST(PoseError, TenDegreeAxisAngle) {
    Rng rng(47);
    const Camera gt = random_camera(rng);
    Camera est = gt;
    const Eigen::Vector3d axis =
        Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    est.R = Eigen::AngleAxisd(10.0 * kDeg, axis).toRotationMatrix() * gt.R;
    const PoseError e = pose_error(est, gt);
    EXPECT_NEAR(e.rot_deg, 10.0, 1e-9);
    EXPECT_NEAR(e.trans_deg, 0.0, 1e-9);
}

TEST(PoseError, AntipodalTranslation) {
    Rng rng(53);
    const Camera gt = random_camera(rng);
    Camera est = gt;
    est.t = -gt.t;
    EXPECT_NEAR(pose_error(est, gt).trans_deg, 180.0, 1e-9);
}

TEST(PoseAuc, AllZeroErrors) {
    std::vector<PoseError> errors(5);
    const auto auc = pose_auc(errors, {5, 10, 20});
    for (double a : auc) EXPECT_DOUBLE_EQ(a, 1.0);
}

TEST(PoseAuc, HalfThresholdSample) {
    // single sample at tau/2: the step integral gives exactly 1/2
    std::vector<PoseError> errors = {{5.0, 1.0}};
    EXPECT_DOUBLE_EQ(pose_auc(errors, {10.0})[0], 0.5);
}

TEST(PoseAuc, AllAboveThreshold) {
    std::vector<PoseError> errors = {{30.0, 0.0}, {0.0, 50.0}};
    EXPECT_DOUBLE_EQ(pose_auc(errors, {20.0})[0], 0.0);
}

TEST(PoseAuc, PermutationInvariant) {
    std::vector<PoseError> a = {{1, 2}, {8, 3}, {15, 4}, {2, 22}};
    std::vector<PoseError> b = {a[2], a[0], a[3], a[1]};
    EXPECT_EQ(pose_auc(a, {5, 10, 20}), pose_auc(b, {5, 10, 20}));
    EXPECT_THROW(pose_auc({}, {5.0}), std::invalid_argument);
}

TEST(RoundTrip, ThousandRandomCameras) {
    Rng rng(61);
    double max_rot = 0, max_t = 0, max_k = 0;
    for (int i = 0; i < 1000; ++i) {
        const Camera cam = random_camera(rng);
        const RaySet rays = cameras_to_rays(cam, random_uv(rng, 16));
        const Camera rec = rays_to_camera(rays, std::nullopt, cam.width, cam.height);
        max_rot = std::max(max_rot, pose_error(rec, cam).rot_deg * kDeg);
        max_t = std::max(max_t, (rec.t - cam.t).norm());
        for (int a = 0; a < 3; ++a)
            for (int b = a; b < 3; ++b)
                max_k = std::max(max_k, std::abs(rec.K(a, b) - cam.K(a, b)) /
                                            std::max(1.0, std::abs(cam.K(a, b))));
    }
    EXPECT_LT(max_rot, 1e-6);
    EXPECT_LT(max_t, 1e-6);
    EXPECT_LT(max_k, 1e-6);
}

TEST(NoiseDegradation, MedianRotationMonotone) {
    Rng rng(67);
    std::vector<double> medians;
    for (double sigma : {1e-4, 1e-3, 1e-2}) {
        std::vector<double> errs;
        Rng local(71);  // same cameras for every sigma
        for (int i = 0; i < 60; ++i) {
            const Camera cam = random_camera(local);
            RaySet rays = cameras_to_rays(cam, random_uv(local, 16));
            for (auto& r : rays.rays) {
                r.d += sigma * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
                r = normalize_ray(r);
            }
            const Camera rec = rays_to_camera(rays, std::nullopt, cam.width, cam.height);
            errs.push_back(pose_error(rec, cam).rot_deg);
        }
        std::sort(errs.begin(), errs.end());
        medians.push_back(errs[errs.size() / 2]);
    }
    EXPECT_LE(medians[0], medians[1]);
    EXPECT_LE(medians[1], medians[2]);
    EXPECT_LT(medians[1], 1.0);  // sigma 1e-3 keeps the median under a degree
}

TEST(CameraJson, ExactRoundTrip) {
    Rng rng(73);
    const Camera cam = random_camera(rng);
    const std::string path = testing::TempDir() + "cam_roundtrip.json";
    save_camera_json(cam, path);
    const Camera back = load_camera_json(path);
    EXPECT_EQ(cam.K, back.K);
    EXPECT_EQ(cam.R, back.R);
    EXPECT_EQ(cam.t, back.t);
    EXPECT_EQ(cam.width, back.width);
}

TEST(RaysJson, ExactRoundTrip) {
    Rng rng(79);
    const Camera cam = random_camera(rng);
    const RaySet rays = cameras_to_rays(cam, random_uv(rng, 5));
    const std::string path = testing::TempDir() + "rays_roundtrip.json";
    save_rays_json(rays, path);
    const RaySet back = load_rays_json(path);
    ASSERT_EQ(back.rays.size(), rays.rays.size());
    for (size_t i = 0; i < rays.rays.size(); ++i) {
        EXPECT_EQ(rays.rays[i].d, back.rays[i].d);
        EXPECT_EQ(rays.rays[i].m, back.rays[i].m);
        EXPECT_EQ(rays.uv[i], back.uv[i]);
    }
}
