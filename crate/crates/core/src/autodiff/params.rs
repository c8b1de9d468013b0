use super::Tensor;

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// First/second optimizer moments, lazily sized with the tensor.
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Excluded from weight decay (biases, norm gains, loss scales).
    pub no_decay: bool,
}

/// Named trainable parameters of a model. Owns values, gradients, and
/// optimizer state; tapes reference entries by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        self.add_with(name, shape, data, false)
    }

    pub fn add_no_decay(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> ParamId {
        self.add_with(name, shape, data, true)
    }

    fn add_with(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        no_decay: bool,
    ) -> ParamId {
        let n = data.len();
        let mut tensor = Tensor::new(shape, data).expect("parameter shape/data mismatch");
        tensor.requires_grad = true;
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            m: vec![0.0; n],
            v: vec![0.0; n],
            no_decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = Some(vec![0.0; e.tensor.numel()]);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copy of all parameter values, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.tensor.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.tensor.data.clone_from(s);
        }
    }
}
