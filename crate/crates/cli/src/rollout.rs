//! Closed-loop rollouts at the environment's control rate. In perception mode
//! the target follows the pipeline's published estimates and the robot holds
//! still until the first one arrives.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args};
use reach_core::chain::{Vec3, HEAD};
use reach_core::env::{EnvConfig, ReachEnv};
use reach_core::percept::{
    load_detections, targets_to_csv, DepthImage, DetectionBox, FrameOutcome, Pipeline,
};
use reach_core::ppo::derive_rng;

use crate::{
    check_policy_fits, create_out, load_checkpoint, parse_point, write_artifact, Classify, Failure,
    RunContext,
};

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["target", "detections"])))]
pub struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixed target `x,y,z` in the base frame, metres.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    target: Option<[f64; 3]>,
    /// Detections file; frame ids are step indices.
    #[arg(long, requires = "depth_dir")]
    detections: Option<PathBuf>,
    /// Directory holding `<frame_id>.pgm` depth images.
    #[arg(long)]
    depth_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    steps: usize,
}

struct Perception {
    pipeline: Pipeline,
    frames: BTreeMap<u64, Vec<DetectionBox>>,
    depth_dir: PathBuf,
    published: Vec<reach_core::percept::TargetEstimate>,
}

pub fn run(ctx: &RunContext, args: RolloutArgs) -> Result<(), Failure> {
    if args.steps == 0 {
        return Err(Failure::Config(anyhow!("--steps must be positive")));
    }
    let chain = Arc::new(ctx.config.build_chain().config_err()?);
    let params = load_checkpoint(&args.checkpoint)?;
    check_policy_fits(&params, chain.dof())?;
    let env_config = EnvConfig {
        horizon: args.steps,
        ..ctx.config.env.clone()
    };
    let mut env = ReachEnv::new(chain.clone(), env_config, ctx.seed).config_err()?;
    env.reset();
    let head = chain.frame_id(HEAD).config_err()?;

    let mut perception = match (&args.detections, &args.depth_dir) {
        (Some(det), Some(dir)) => Some(Perception {
            pipeline: Pipeline::new(ctx.config.camera.clone()).config_err()?,
            frames: load_detections(det)
                .runtime_err()?
                .into_iter()
                .map(|f| (f.frame_id, f.boxes))
                .collect(),
            depth_dir: dir.clone(),
            published: Vec::new(),
        }),
        _ => None,
    };
    let mut have_target = false;
    if let Some(t) = args.target {
        env.set_target(Vec3::from(t));
        have_target = true;
    }

    let mut rng = derive_rng(ctx.seed, 0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    header.extend(chain.joints().iter().map(|j| format!("q_{}", j.name)));
    header.extend(
        [
            "hand_x", "hand_y", "hand_z", "target_x", "target_y", "target_z", "reward", "distance",
        ]
        .map(String::from),
    );
    w.write_record(&header).runtime_err()?;

    let dt = ctx.config.env.dt;
    for step in 0..args.steps {
        if let Some(p) = perception.as_mut() {
            if let Some(boxes) = p.frames.get(&(step as u64)) {
                let path = p.depth_dir.join(format!("{step}.pgm"));
                let depth = DepthImage::load_pgm(&path).runtime_err()?;
                let poses = chain.forward_kinematics(&env.state().q).runtime_err()?;
                let outcome = p
                    .pipeline
                    .process(
                        step as u64,
                        step as f64 * dt,
                        boxes,
                        &depth,
                        poses.frame(head),
                        &mut rng,
                    )
                    .with_context(|| format!("frame {step}"))
                    .runtime_err()?;
                if let FrameOutcome::Published(t) = outcome {
                    env.set_target(t.point_base);
                    p.published.push(t);
                    have_target = true;
                }
            }
        }

        let mut row = vec![step.to_string()];
        if !have_target {
            row.extend(env.state().q.iter().map(f64::to_string));
            row.extend(env.hand_position().iter().map(f64::to_string));
            row.extend(std::iter::repeat_n(String::new(), 5));
            w.write_record(&row).runtime_err()?;
            continue;
        }
        let action = params
            .action_mean(env.observation().as_slice())
            .runtime_err()?;
        let s = env.step(&action).runtime_err()?;
        row.extend(env.state().q.iter().map(f64::to_string));
        row.extend(env.hand_position().iter().map(f64::to_string));
        row.extend(env.state().target.iter().map(f64::to_string));
        row.push(s.reward.to_string());
        row.push(s.info.distance.to_string());
        w.write_record(&row).runtime_err()?;
        if s.done {
            break;
        }
    }

    if let Some(p) = &perception {
        if p.published.is_empty() {
            return Err(Failure::Runtime(anyhow!("no target was ever published")));
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}")).runtime_err()?;
    create_out(&ctx.out)?;
    if let Some(p) = &perception {
        write_artifact(
            &ctx.out.join("targets.csv"),
            &targets_to_csv(&p.published).runtime_err()?,
        )?;
    }
    write_artifact(&ctx.out.join("rollout.csv"), &bytes)?;
    println!(
        "final distance {:.4} m after {} steps",
        env.hand_distance(),
        env.state().step_count
    );
    Ok(())
}
