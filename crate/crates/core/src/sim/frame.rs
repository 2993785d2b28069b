//! Sampling frame: clusters with household counts.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{child_rng, stream};
use crate::sim::config::ScenarioConfig;
use crate::survey::{id, Id};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCluster {
    pub cluster_id: Id,
    pub area_id: Id,
    pub stratum_id: Id,
    /// Households in the cluster.
    pub size: u32,
}

/// Frame clusters of every area, in configuration order. Each area draws its
/// sizes from its own seeded stream.
pub fn build_frame(config: &ScenarioConfig, seed: u64) -> Result<Vec<FrameCluster>> {
    config.validate()?;
    let mut frame = Vec::with_capacity(config.areas.iter().map(|a| a.frame_clusters).sum());
    for (i, area) in config.areas.iter().enumerate() {
        let size = area.cluster_size.unwrap_or(config.cluster_size);
        let mut rng = child_rng(seed, &[stream::FRAME, i as u64]);
        let area_id = id(&area.id);
        let stratum_id = id(area.stratum_id());
        for c in 0..area.frame_clusters {
            frame.push(FrameCluster {
                cluster_id: id(format!("{}-{c:04}", area.id)),
                area_id: area_id.clone(),
                stratum_id: stratum_id.clone(),
                size: rng.random_range(size.min..=size.max),
            });
        }
    }
    Ok(frame)
}

pub fn write_frame_csv<W: Write>(frame: &[FrameCluster], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cluster", "area", "stratum", "size"])?;
    for c in frame {
        w.write_record([&*c.cluster_id, &*c.area_id, &*c.stratum_id, &c.size.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_frame_csv_path(frame: &[FrameCluster], path: impl AsRef<Path>) -> Result<()> {
    write_frame_csv(frame, std::fs::File::create(path)?)
}
