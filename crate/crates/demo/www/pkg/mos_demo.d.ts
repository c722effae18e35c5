/* tslint:disable */
/* eslint-disable */

/**
 * Value of one adapter weight over `steps` merges with predecessors whose weights are
 * `history`, starting from `start`. Element 0 is `start`.
 */
export function merge_trajectory(start: number, history: Float64Array, alpha: number, steps: number): Float64Array;

/**
 * `n` draws from a 2-d Gaussian, flattened as `x0, y0, x1, y1, …`. A covariance that
 * does not factor is sampled from its diagonal. Returns an empty vector on bad input.
 */
export function replay_samples(mean_x: number, mean_y: number, var_x: number, cov_xy: number, var_y: number, n: number, seed: bigint): Float64Array;

/**
 * Trains a small synthetic stream and returns per-stage curves as JSON:
 * `{"classes_seen": [..], "curves": [{"name", "accuracy", "retrieval", "mean_iterations"}]}`,
 * or `{"error": ".."}`.
 */
export function run_stream(tasks: number, classes_per_task: number, separation: number, noise: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly merge_trajectory: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly replay_samples: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number];
    readonly run_stream: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
