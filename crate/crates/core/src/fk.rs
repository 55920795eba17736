//! Forward kinematics from 6D joint rotations, with an analytic backward
//! pass. Used by the redundant-representation guidance route that targets
//! rotation channels.

use crate::skeleton::Skeleton;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..3 {
                out[r][c] += a[r][k] * b[k][c];
            }
        }
    }
    out
}

fn matvec3(a: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[r] += a[r][k] * v[k];
        }
    }
    out
}

fn transpose3(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

const EPS: f64 = 1e-8;

/// Gram-Schmidt a continuous 6D rotation parameterization into a rotation
/// matrix whose columns are the orthonormalized basis.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Mat3 {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(&a1).max(EPS);
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(&u).max(EPS);
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let b3 = cross(&b1, &b2);
    [
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ]
}

/// VJP of [`rot6d_to_matrix`]: gradient w.r.t. the 6 parameters given the
/// gradient w.r.t. the matrix entries.
pub fn rot6d_vjp(r: &[f64; 6], grad_m: &Mat3) -> [f64; 6] {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(&a1).max(EPS);
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(&u).max(EPS);
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];

    // Column cotangents.
    let gb1_col = [grad_m[0][0], grad_m[1][0], grad_m[2][0]];
    let gb2_col = [grad_m[0][1], grad_m[1][1], grad_m[2][1]];
    let gb3 = [grad_m[0][2], grad_m[1][2], grad_m[2][2]];

    // b3 = b1 x b2: g.(da x b) = da.(b x g), g.(a x db) = db.(g x a).
    let mut gb1 = [
        gb1_col[0] + (cross(&b2, &gb3))[0],
        gb1_col[1] + (cross(&b2, &gb3))[1],
        gb1_col[2] + (cross(&b2, &gb3))[2],
    ];
    let gb2 = [
        gb2_col[0] + (cross(&gb3, &b1))[0],
        gb2_col[1] + (cross(&gb3, &b1))[1],
        gb2_col[2] + (cross(&gb3, &b1))[2],
    ];

    // b2 = u / |u|: gu = (I - b2 b2^T) gb2 / n2.
    let b2_dot = dot(&b2, &gb2);
    let gu = [
        (gb2[0] - b2[0] * b2_dot) / n2,
        (gb2[1] - b2[1] * b2_dot) / n2,
        (gb2[2] - b2[2] * b2_dot) / n2,
    ];

    // u = a2 - d b1.
    let mut ga2 = gu;
    let gd = -dot(&b1, &gu);
    for i in 0..3 {
        gb1[i] -= d * gu[i];
    }
    // d = b1 . a2.
    for i in 0..3 {
        gb1[i] += gd * a2[i];
        ga2[i] += gd * b1[i];
    }
    // b1 = a1 / |a1|.
    let b1_dot = dot(&b1, &gb1);
    let ga1 = [
        (gb1[0] - b1[0] * b1_dot) / n1,
        (gb1[1] - b1[1] * b1_dot) / n1,
        (gb1[2] - b1[2] * b1_dot) / n1,
    ];
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

/// Root-relative joint positions from 6D rotations along the kinematic
/// chain. `rotations` holds 6 values per joint.
pub fn fk_local_positions(rotations: &[[f64; 6]], skeleton: &Skeleton) -> Vec<Vec3> {
    let j = skeleton.joint_count();
    debug_assert_eq!(rotations.len(), j);
    let mut world_rot: Vec<Mat3> = Vec::with_capacity(j);
    let mut pos: Vec<Vec3> = Vec::with_capacity(j);
    for k in 0..j {
        let local = rot6d_to_matrix(&rotations[k]);
        if k == 0 {
            world_rot.push(local);
            pos.push([0.0, 0.0, 0.0]);
        } else {
            let p = skeleton.parents[k];
            world_rot.push(matmul3(&world_rot[p], &local));
            let offset = skeleton.rest_offsets[k];
            let step = matvec3(&world_rot[p], &offset);
            pos.push([
                pos[p][0] + step[0],
                pos[p][1] + step[1],
                pos[p][2] + step[2],
            ]);
        }
    }
    pos
}

/// VJP of [`fk_local_positions`]: gradient w.r.t. the per-joint 6D rotation
/// parameters given gradients w.r.t. the root-relative positions.
pub fn fk_vjp(
    rotations: &[[f64; 6]],
    skeleton: &Skeleton,
    grad_pos: &[Vec3],
) -> Vec<[f64; 6]> {
    let j = skeleton.joint_count();
    // Recompute forward intermediates.
    let locals: Vec<Mat3> = rotations.iter().map(rot6d_to_matrix).collect();
    let mut world_rot: Vec<Mat3> = Vec::with_capacity(j);
    for k in 0..j {
        if k == 0 {
            world_rot.push(locals[0]);
        } else {
            world_rot.push(matmul3(&world_rot[skeleton.parents[k]], &locals[k]));
        }
    }

    let mut gpos: Vec<Vec3> = grad_pos.to_vec();
    let mut gworld: Vec<Mat3> = vec![[[0.0; 3]; 3]; j];

    // Positions: p[k] = p[parent] + world_rot[parent] * offset[k].
    for k in (1..j).rev() {
        let p = skeleton.parents[k];
        let g = gpos[k];
        for i in 0..3 {
            gpos[p][i] += g[i];
        }
        let offset = skeleton.rest_offsets[k];
        // d(R o)/dR contribution: outer product g o^T.
        for r in 0..3 {
            for c in 0..3 {
                gworld[p][r][c] += g[r] * offset[c];
            }
        }
    }

    // Rotations: world_rot[k] = world_rot[parent] * locals[k].
    let mut glocal: Vec<Mat3> = vec![[[0.0; 3]; 3]; j];
    for k in (1..j).rev() {
        let p = skeleton.parents[k];
        let gw = gworld[k];
        // gL = W_parent^T gW; gW_parent += gW L^T.
        let gl = matmul3(&transpose3(&world_rot[p]), &gw);
        for r in 0..3 {
            for c in 0..3 {
                glocal[k][r][c] += gl[r][c];
            }
        }
        let add = matmul3(&gw, &transpose3(&locals[k]));
        for r in 0..3 {
            for c in 0..3 {
                gworld[p][r][c] += add[r][c];
            }
        }
    }
    for r in 0..3 {
        for c in 0..3 {
            glocal[0][r][c] += gworld[0][r][c];
        }
    }

    (0..j).map(|k| rot6d_vjp(&rotations[k], &glocal[k])).collect()
}

/// The identity rotation in 6D form.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
