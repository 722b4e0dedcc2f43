pub mod pruning_oracle;
