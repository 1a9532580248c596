//! Builds generator, SUT and judge instances from a pipeline config. Each
//! worker gets its own instances.

use chanprobe::attribution::{GroundTruthBackend, JudgmentBackend, PromptStore, VlmBackend};
use chanprobe::genbackend::{Generator, GroundTruthMap, SyntheticRenderer};
use chanprobe::protocol::{Connection, ExternalGenerator, ExternalSut};
use chanprobe::scenario::{build_scenario, Scenario};
use chanprobe::sut::{Sut, ToyClassifier};

use crate::config::{AdapterSpec, GeneratorSpec, JudgeKind, PipelineConfig, SutSpec};
use crate::error::{io_err, CliError, CliResult};

pub struct Backends {
    pub generator: Box<dyn Generator>,
    pub sut: Box<dyn Sut>,
}

pub struct BackendFactory {
    config: PipelineConfig,
    renderer: Option<SyntheticRenderer>,
    toy: Option<ToyClassifier>,
    scenario: Option<Scenario>,
}

fn connect(spec: &AdapterSpec) -> CliResult<Connection> {
    let conn = match (&spec.command, &spec.socket) {
        (Some(cmd), None) => {
            let (program, args) = cmd
                .split_first()
                .ok_or_else(|| CliError::Config("adapter command is empty".into()))?;
            Connection::spawn(program, args)?
        }
        #[cfg(unix)]
        (None, Some(path)) => Connection::unix(path)?,
        _ => return Err(CliError::Config("adapter needs exactly one of command or socket".into())),
    };
    Ok(conn)
}

impl BackendFactory {
    pub fn new(config: &PipelineConfig) -> CliResult<Self> {
        let renderer = match config.generator {
            GeneratorSpec::Synthetic => Some(SyntheticRenderer::new(config.scenario.renderer.clone())?),
            GeneratorSpec::External(_) => None,
        };
        let (toy, scenario) = match &config.sut {
            SutSpec::Scenario => {
                let sc = build_scenario(&config.scenario)?;
                log::info!(
                    "scenario built: spurious_strength={} train accuracy {:.3}",
                    sc.spec.spurious_strength,
                    sc.train_accuracy
                );
                (Some(sc.sut.clone()), Some(sc))
            }
            SutSpec::Toy { path } => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                let toy: ToyClassifier = serde_json::from_str(&text).map_err(|source| CliError::Artifact {
                    path: path.clone(),
                    source,
                })?;
                (Some(toy), None)
            }
            SutSpec::External(_) => (None, None),
        };
        Ok(Self {
            config: config.clone(),
            renderer,
            toy,
            scenario,
        })
    }

    pub fn instantiate(&self) -> CliResult<Backends> {
        let generator: Box<dyn Generator> = match (&self.config.generator, &self.renderer) {
            (GeneratorSpec::Synthetic, Some(r)) => Box::new(r.clone()),
            (GeneratorSpec::External(spec), _) => Box::new(ExternalGenerator::connect(connect(spec)?)?),
            _ => unreachable!("synthetic renderer is built in new()"),
        };
        let sut: Box<dyn Sut> = match (&self.config.sut, &self.toy) {
            (SutSpec::External(spec), _) => Box::new(ExternalSut::connect(connect(spec)?)?),
            (_, Some(t)) => Box::new(t.clone()),
            _ => unreachable!("toy SUT is built in new()"),
        };
        Ok(Backends { generator, sut })
    }

    pub fn renderer(&self) -> Option<&SyntheticRenderer> {
        self.renderer.as_ref()
    }

    pub fn toy(&self) -> Option<&ToyClassifier> {
        self.toy.as_ref()
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        self.scenario.as_ref()
    }

    pub fn ground_truth(&self) -> Option<GroundTruthMap> {
        self.renderer.as_ref().map(SyntheticRenderer::ground_truth)
    }

    pub fn judge(&self) -> CliResult<Option<Box<dyn JudgmentBackend>>> {
        let a = &self.config.attribution;
        Ok(match a.backend {
            JudgeKind::None => None,
            JudgeKind::GroundTruth => {
                let map = self.ground_truth().ok_or_else(|| {
                    CliError::Config("ground_truth attribution needs the synthetic generator".into())
                })?;
                Some(Box::new(GroundTruthBackend { map }))
            }
            JudgeKind::Vlm => {
                let prompts = match &a.prompts_dir {
                    Some(dir) => PromptStore::load_dir(dir)?,
                    None => PromptStore::default(),
                };
                Some(Box::new(VlmBackend::new(a.vlm.clone(), prompts)?))
            }
        })
    }
}
