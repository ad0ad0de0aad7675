"""Shared fixtures: a coarse 41x41 instance of the reference problem.

The coarse grid keeps unit tests fast (dense eigensolver path) while
exercising the same code paths as the full-resolution study.  Grids
this coarse cannot meet the full-resolution accuracy gates, so tests
here assert structure, identities and refinement behavior; the
full-scale numbers live in test_acceptance.py.
"""

import numpy as np
import pytest

from fpcirc.control import ControlTrajectory
from fpcirc.operators import assemble_generator, eigenbasis
from fpcirc.pde import controlled_operator
from fpcirc.problem import (
    ExperimentConfig,
    build_initial_density,
    desired_vorticity,
    reference_problem,
)
from fpcirc.reduction import assemble_reduced_model, project


@pytest.fixture(scope="session")
def coarse_cfg():
    return ExperimentConfig(nx=41, ny=41, M=12, n_particles=2000)


@pytest.fixture(scope="session")
def coarse_prob(coarse_cfg):
    return reference_problem(coarse_cfg)


@pytest.fixture(scope="session")
def coarse_gen(coarse_prob):
    return assemble_generator(
        coarse_prob.potential, coarse_prob.config.D, coarse_prob.grid
    )


@pytest.fixture(scope="session")
def coarse_basis(coarse_gen, coarse_prob):
    return eigenbasis(coarse_gen, coarse_prob.rho_s, coarse_prob.config.M)


@pytest.fixture(scope="session")
def coarse_model(coarse_basis, coarse_prob):
    return assemble_reduced_model(
        coarse_basis,
        coarse_prob.shapes,
        coarse_prob.potential,
        coarse_prob.config.D,
        desired_vorticity(coarse_prob.shapes),
    )


@pytest.fixture(scope="session")
def coarse_op(coarse_prob):
    return controlled_operator(
        coarse_prob.grid,
        coarse_prob.potential,
        coarse_prob.config.D,
        coarse_prob.shapes,
        coarse_prob.rho_s,
    )


@pytest.fixture(scope="session")
def coarse_rho0(coarse_prob):
    return build_initial_density(
        coarse_prob.initial, coarse_prob.grid, coarse_prob.w
    )


@pytest.fixture(scope="session")
def coarse_c0(coarse_rho0, coarse_basis):
    return project(coarse_rho0, coarse_basis)


@pytest.fixture
def unit_horizon_traj(coarse_cfg):
    cfg = coarse_cfg
    return ControlTrajectory.from_constant(
        cfg.t0, cfg.tf, cfg.dt, cfg.u1_init, cfg.u2_init
    )


def assert_unit_vector(e, index, atol):
    expect = np.zeros_like(e)
    expect[index] = 1.0
    np.testing.assert_allclose(e, expect, atol=atol)
