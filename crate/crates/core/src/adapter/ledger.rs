use serde::Serialize;

use crate::model::ModelConfig;

/// Trainable-scalar count for one task adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamLedger {
    pub kernels: usize,
    pub gates: usize,
    pub layernorms: usize,
    pub pool: usize,
    pub head: usize,
    pub total: usize,
}

/// Per-task parameter cost of a kernel size `k` adapter on `config`.
pub fn count_task_params(config: &ModelConfig, k: usize, classes: usize) -> ParamLedger {
    let (d, l, h) = (config.embed_dim, config.layers, config.heads);
    let kernels = 3 * l * h * k * k;
    let gates = 3 * l * h;
    // two per layer plus the final norm, each γ and β
    let layernorms = 2 * d * (2 * l + 1);
    let pool = d + 1;
    let head = d * classes + classes;
    ParamLedger {
        kernels,
        gates,
        layernorms,
        pool,
        head,
        total: kernels + gates + layernorms + pool + head,
    }
}

impl std::fmt::Display for ParamLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "kernels {}", self.kernels)?;
        writeln!(f, "gates {}", self.gates)?;
        writeln!(f, "layernorms {}", self.layernorms)?;
        writeln!(f, "pool {}", self.pool)?;
        writeln!(f, "head {}", self.head)?;
        write!(f, "total {}", self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageShape;

    #[test]
    fn cifar_profile_costs_25755_per_task() {
        let l = count_task_params(&ModelConfig::cifar(), 15, 10);
        assert_eq!(
            (l.kernels, l.gates, l.layernorms, l.pool, l.head, l.total),
            (16200, 72, 6656, 257, 2570, 25_755)
        );
    }

    #[test]
    fn tiny_profile() {
        let img = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let l = count_task_params(&ModelConfig::tiny(64, 2, 2, img, 2), 7, 2);
        assert_eq!(
            (l.kernels, l.gates, l.layernorms, l.pool, l.head, l.total),
            (588, 12, 640, 65, 130, 1_435)
        );
    }

    #[test]
    fn degenerate_no_layers() {
        let mut c = ModelConfig::cifar();
        c.layers = 0;
        c.heads = 0;
        let l = count_task_params(&c, 1, 3);
        assert_eq!((l.kernels, l.gates), (0, 0));
        assert_eq!(l.layernorms, 2 * 256);
        assert_eq!(l.pool, 257);
        assert_eq!(l.total, 512 + 257 + 256 * 3 + 3);
    }

    #[test]
    fn kernel_23_matches_reported_growth() {
        // 47k per task at k = 23 versus 26k at k = 15
        let l = count_task_params(&ModelConfig::cifar(), 23, 10);
        assert_eq!(l.total / 1000, 47);
    }
}
