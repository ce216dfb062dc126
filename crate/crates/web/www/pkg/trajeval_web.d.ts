/* tslint:disable */
/* eslint-disable */

export class Clusters {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly dense: number;
    readonly effectiveSupport: number;
    readonly entropy: number;
    readonly labels: Uint32Array;
    /**
     * 1 for noise points, 0 otherwise.
     */
    readonly noise: Uint8Array;
}

export function clusterClicks(xy: Int32Array, eps: number, l1: boolean, min_pts: number): Clusters;

export function rewardField(x1: number, y1: number, x2: number, y2: number, res: number): Float64Array;

export function scheduleCurve(p_lb: number, gap: number, kappa: number, mu: number, increasing: boolean, samples: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_clusters_free: (a: number, b: number) => void;
    readonly clusterClicks: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly clusters_dense: (a: number) => number;
    readonly clusters_effectiveSupport: (a: number) => number;
    readonly clusters_entropy: (a: number) => number;
    readonly clusters_labels: (a: number) => [number, number];
    readonly clusters_noise: (a: number) => [number, number];
    readonly rewardField: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly scheduleCurve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
