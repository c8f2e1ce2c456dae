use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use mobseg_core::community::Partition;
use mobseg_core::data::CityDataset;
use mobseg_core::metrics::MetricReport;
use mobseg_core::model::{GroupModelSet, Variant};
use mobseg_core::whatif::{ScenarioBase, StrategyStore};
use mobseg_core::Result;
use serde::Serialize;

use crate::config::ServiceConfig;

/// Analysis results attached to one dataset.
#[derive(Default)]
pub struct Analysis {
    pub partition: Option<Arc<Partition>>,
    /// Attribute of the last detection or training request.
    pub attribute: Option<String>,
    pub models: BTreeMap<(String, Variant), Arc<GroupModelSet>>,
    pub metrics: Option<(String, Arc<MetricReport>)>,
}

impl Analysis {
    /// The requested variant, or the richest one trained for `attribute`.
    pub fn model(&self, attribute: &str, variant: Option<Variant>) -> Option<Arc<GroupModelSet>> {
        match variant {
            Some(v) => self.models.get(&(attribute.to_string(), v)).cloned(),
            None => Variant::ALL
                .iter()
                .rev()
                .find_map(|v| self.models.get(&(attribute.to_string(), *v)).cloned()),
        }
    }
}

pub struct DatasetEntry {
    pub id: String,
    pub dataset: CityDataset,
    pub analysis: RwLock<Analysis>,
    pub store: Mutex<StrategyStore>,
    /// Last scenario base built, with the model it was built from.
    pub scenario: Mutex<Option<(Arc<GroupModelSet>, Arc<ScenarioBase>)>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    #[default]
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct JobStatus {
    pub state: JobState,
    pub job_id: Option<u64>,
    pub dataset: Option<String>,
    pub attribute: Option<String>,
    pub variants: Vec<Variant>,
    /// Finished network epochs over all planned ones.
    pub progress: f64,
    pub current: Option<mobseg_core::model::train::Progress>,
    pub error: Option<String>,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub(crate) datasets: RwLock<BTreeMap<String, Arc<DatasetEntry>>>,
    pub(crate) active: RwLock<Option<String>>,
    pub(crate) job: Mutex<JobStatus>,
    pub(crate) next_job: Mutex<u64>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            datasets: RwLock::new(BTreeMap::new()),
            active: RwLock::new(None),
            job: Mutex::new(JobStatus::default()),
            next_job: Mutex::new(0),
        })
    }

    /// Registers a dataset under a prefix of its content hash and makes it
    /// the active one. Re-adding identical content returns the same id.
    pub fn add_dataset(&self, dataset: CityDataset) -> Result<String> {
        let id = dataset.content_hash()[..12].to_string();
        let mut all = self.datasets.write().expect("lock");
        if !all.contains_key(&id) {
            let store = StrategyStore::open(&self.config.data_dir.join(&id), &id)?;
            all.insert(
                id.clone(),
                Arc::new(DatasetEntry {
                    id: id.clone(),
                    dataset,
                    analysis: RwLock::new(Analysis::default()),
                    store: Mutex::new(store),
                    scenario: Mutex::new(None),
                }),
            );
        }
        *self.active.write().expect("lock") = Some(id.clone());
        Ok(id)
    }

    /// Installs a trained model, e.g. one loaded from a checkpoint.
    pub fn add_model(&self, dataset: &str, model: GroupModelSet) -> Option<()> {
        let e = self.dataset(dataset)?;
        let mut a = e.analysis.write().expect("lock");
        a.attribute.get_or_insert_with(|| model.attribute.clone());
        a.models.insert((model.attribute.clone(), model.variant), Arc::new(model));
        Some(())
    }

    pub fn dataset(&self, id: &str) -> Option<Arc<DatasetEntry>> {
        self.datasets.read().expect("lock").get(id).cloned()
    }

    pub fn active(&self) -> Option<Arc<DatasetEntry>> {
        let id = self.active.read().expect("lock").clone()?;
        self.dataset(&id)
    }

    pub fn job_status(&self) -> JobStatus {
        self.job.lock().expect("lock").clone()
    }
}
