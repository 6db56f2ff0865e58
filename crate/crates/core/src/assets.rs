//! Files shipped inside the library: the pretrained base model and the
//! regularization prompt set.

use std::path::PathBuf;

use crate::config::ScheduleConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::model::BaseModel;
use crate::objectives::RegPromptSet;
use crate::persistence::Container;

pub const BASE_SNAPSHOT: &[u8] = include_bytes!("../assets/base.plab");
pub const REG_PROMPTS: &str = include_str!("../assets/reg_prompts.txt");

pub fn base_model() -> Result<BaseModel> {
    BaseModel::from_snapshot(&Container::from_bytes(BASE_SNAPSHOT)?)
}

pub fn reg_prompts() -> RegPromptSet {
    RegPromptSet::parse(REG_PROMPTS).expect("bundled prompts are valid")
}

/// Schedule the bundled base was trained with.
pub fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().expect("default schedule is valid")
}

/// Fixture subjects in the source tree (absent from installed copies).
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
