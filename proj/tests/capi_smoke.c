/* Compiled as plain C to ensure the public header stays C-clean. */
#include <stdio.h>
#include <string.h>

#include "infovla/infovla_c.h"

int main(void) {
    int failures = 0;
    ivla_experiment* exp = NULL;

    if (ivla_version() == NULL || strlen(ivla_version()) == 0) {
        fprintf(stderr, "FAIL: version\n");
        ++failures;
    }
    if (ivla_preset_json("ci") == NULL) {
        fprintf(stderr, "FAIL: ci preset\n");
        ++failures;
    }
    if (ivla_preset_json("nope") != NULL) {
        fprintf(stderr, "FAIL: unknown preset should be NULL\n");
        ++failures;
    }
    if (ivla_experiment_create("{bad", &exp) != IVLA_ERR_CONFIG || exp != NULL) {
        fprintf(stderr, "FAIL: bad config must fail\n");
        ++failures;
    }
    if (ivla_experiment_create(ivla_preset_json("ci"), &exp) != IVLA_OK || exp == NULL) {
        fprintf(stderr, "FAIL: create from preset\n");
        ++failures;
    } else {
        if (ivla_experiment_set(exp, "strategy", "\"er\"") != IVLA_OK) {
            fprintf(stderr, "FAIL: override\n");
            ++failures;
        }
        ivla_experiment_destroy(exp);
    }
    if (failures == 0) printf("capi smoke: ok\n");
    return failures;
}
