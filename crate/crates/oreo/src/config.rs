//! The single run configuration shared by every CLI command.
//!
//! One TOML file with dotted keys per stage; command-line flags override
//! file values, and secrets only ever come from environment variables.
//! Unknown keys are rejected by name. The effective (defaults-resolved)
//! configuration is echoed into the run directory so any run can be
//! reproduced from its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{
    EndpointConfig, ExtractiveGenerator, FixtureTeacher, GeneratorClient, HttpGenerator,
    HttpTeacher, ReplayTeacher, TeacherClient,
};
use crate::cml::CmlConfig;
use crate::model::{DecodeParams, ModelConfig};
use crate::pipeline::{HopType, Query};
use crate::ppo::PpoConfig;
use crate::sft::SftConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    /// Ingested chunk store with cached token counts.
    pub store: PathBuf,
    /// Subword vocabulary trained at ingestion.
    pub vocab: PathBuf,
    /// Retrieval dump (one ranked result per query).
    pub retrieval: PathBuf,
    pub gold: PathBuf,
    /// Parent directory for stage checkpoints (sft/, cml/, rl/).
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Optional prompt-template directory overriding the built-ins.
    pub prompts: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "fixtures/corpus_a.jsonl".into(),
            queries: "fixtures/queries_a.jsonl".into(),
            store: "out/store.jsonl".into(),
            vocab: "out/vocab.json".into(),
            retrieval: "out/retrieval.jsonl".into(),
            gold: "out/gold.jsonl".into(),
            checkpoints: "out/checkpoints".into(),
            reports: "out/reports".into(),
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherChoice {
    Fixture,
    Replay,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorChoice {
    Extractive,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub teacher: TeacherChoice,
    pub generator: GeneratorChoice,
    pub judge: TeacherChoice,
    pub teacher_endpoint: EndpointConfig,
    pub generator_endpoint: EndpointConfig,
    pub judge_endpoint: EndpointConfig,
    /// Scripted completions for the replay teacher/judge.
    pub replay_file: Option<PathBuf>,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        ClientsConfig {
            teacher: TeacherChoice::Fixture,
            generator: GeneratorChoice::Extractive,
            judge: TeacherChoice::Fixture,
            teacher_endpoint: EndpointConfig::default(),
            generator_endpoint: EndpointConfig::default(),
            judge_endpoint: EndpointConfig::default(),
            replay_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub hop_type: HopType,
    /// Chunks retrieved per query.
    pub retrieval_k: usize,
    pub bootstrap_rounds: usize,
    /// Ablation thresholds for the minimum-token sweep.
    pub ablation_thresholds: Vec<usize>,
    /// Noise levels run 0..=max in the noise protocol.
    pub noise_max: usize,
    pub paths: Paths,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub cml: CmlConfig,
    pub ppo: PpoConfig,
    pub decode: DecodeParams,
    pub clients: ClientsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hop_type: HopType::Single,
            retrieval_k: 5,
            bootstrap_rounds: crate::data_factory::DEFAULT_BOOTSTRAP_ROUNDS,
            ablation_thresholds: (1..=10).map(|i| i * 30).collect(),
            noise_max: 4,
            paths: Paths::default(),
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            cml: CmlConfig::default(),
            ppo: PpoConfig::default(),
            decode: DecodeParams::default(),
            clients: ClientsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Force one master seed into every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.sft.seed = seed;
        self.cml.seed = seed;
        self.ppo.seed = seed;
        self.decode.seed = seed;
    }

    /// Serialize the resolved configuration into the run directory.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        let path = out_dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Every input path a command reads must exist before it starts.
    pub fn require_inputs(&self, inputs: &[&Path]) -> Result<()> {
        for path in inputs {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "required input {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn teacher_client(&self) -> Result<Box<dyn TeacherClient>> {
        self.build_teacher(self.clients.teacher, &self.clients.teacher_endpoint)
    }

    pub fn judge_client(&self) -> Result<Box<dyn TeacherClient>> {
        self.build_teacher(self.clients.judge, &self.clients.judge_endpoint)
    }

    fn build_teacher(
        &self,
        choice: TeacherChoice,
        endpoint: &EndpointConfig,
    ) -> Result<Box<dyn TeacherClient>> {
        match choice {
            TeacherChoice::Fixture => Ok(Box::new(FixtureTeacher)),
            TeacherChoice::Replay => {
                let path = self.clients.replay_file.as_ref().ok_or_else(|| {
                    Error::Config("clients.replay_file is required for the replay teacher".into())
                })?;
                Ok(Box::new(ReplayTeacher::from_file(path)?))
            }
            TeacherChoice::Http => {
                if endpoint.url.is_empty() {
                    return Err(Error::Config(
                        "an http teacher needs a non-empty endpoint url".into(),
                    ));
                }
                Ok(Box::new(HttpTeacher {
                    endpoint: endpoint.clone(),
                }))
            }
        }
    }

    /// The generator doubles as the reward model during alignment.
    pub fn generator_client(&self, queries: &[Query]) -> Result<Box<dyn GeneratorClient>> {
        match self.clients.generator {
            GeneratorChoice::Extractive => Ok(Box::new(ExtractiveGenerator::new(
                queries
                    .iter()
                    .map(|q| (q.question.clone(), q.answers.clone())),
            ))),
            GeneratorChoice::Http => {
                if self.clients.generator_endpoint.url.is_empty() {
                    return Err(Error::Config(
                        "an http generator needs a non-empty endpoint url".into(),
                    ));
                }
                Ok(Box::new(HttpGenerator {
                    endpoint: self.clients.generator_endpoint.clone(),
                }))
            }
        }
    }

    pub fn prompt_set(&self) -> Result<crate::prompts::PromptSet> {
        match &self.paths.prompts {
            Some(dir) => crate::prompts::PromptSet::load(dir),
            None => Ok(crate::prompts::PromptSet::builtin()),
        }
    }
}
